//! `dotune`: corpora, training, benchmarks and simulated device fleets.
//!
//! Every subcommand reads one JSON run configuration (defaults apply when
//! `--config` is absent) and writes its reports under the output directory.
//! Exit status is 0 on success, 1 when the configuration or arguments are
//! invalid and 2 when the run itself fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dotune_core::harness::{
    bench_task, characterize_fleet, fleet_devices, generate_corpora, read_corpus, run_device, run_fleet,
    run_fluctuation, train_models, write_json, write_text, ModelSet, RunConfig, Task,
};
use dotune_core::ml::Model;

#[derive(Parser)]
#[command(name = "dotune", version, about = "Automated tuning of simulated double quantum dots")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, overriding the configuration.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pinch-off, single-dot, double-dot and regime corpora.
    GenData,
    /// Train the four classifiers and evaluate them over redraws.
    Train,
    /// Compare every classifier family and representation.
    Bench,
    /// Assess and characterize every device of the fleet.
    Characterize,
    /// Characterize and tune one device, keeping the full log.
    Tune {
        /// 1-based position in the fleet; the first fault-free device if omitted.
        #[arg(long)]
        device: Option<usize>,
    },
    /// Characterize and tune the whole fleet over every cooldown.
    Fleet,
    /// Accuracy spread against the number of redraws.
    Fluctuation,
}

enum Failure {
    Invalid(anyhow::Error),
    Run(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.global).map_err(Failure::Invalid)?;
    if let Command::Tune { device: Some(i) } = cli.command {
        if i == 0 || i > cfg.fleet.count {
            return Err(Failure::Invalid(anyhow::anyhow!(
                "--device must lie in 1..={}, got {i}",
                cfg.fleet.count
            )));
        }
    }
    execute(&cfg, cli.command).map_err(Failure::Run)
}

fn execute(cfg: &RunConfig, command: Command) -> anyhow::Result<()> {
    let out = &cfg.output_dir;
    match command {
        Command::GenData => {
            for (task, n) in generate_corpora(cfg)? {
                println!("{task}: {n} records -> {}", cfg.dataset_path(task).display());
            }
        }
        Command::Train => {
            for t in train_models(cfg)? {
                println!(
                    "{}: {} accuracy {:.4} ± {:.4} over {} redraws",
                    t.task,
                    t.model.family().name(),
                    t.eval.accuracy_mean,
                    t.eval.accuracy_std,
                    t.eval.n
                );
            }
            println!("models -> {}", cfg.models_dir().display());
        }
        Command::Bench => {
            for &task in &cfg.bench.tasks {
                let table = bench_task(cfg, task)?;
                let dir = out.join("bench");
                write_json(&dir.join(format!("{task}.json")), &table)?;
                write_text(&dir.join(format!("{task}.csv")), &table.to_csv())?;
                write_text(&dir.join(format!("{task}_timing.csv")), &table.timing_csv())?;
                let ranking: Vec<String> = table.family_ranking().iter().map(|(f, a)| format!("{f} {a:.3}")).collect();
                println!("{task}: {} rows; best per family: {}", table.rows.len(), ranking.join(", "));
            }
        }
        Command::Characterize => {
            let pinch = load_model(&cfg.models_dir(), Task::Pinchoff)?;
            let (report, outcomes) = characterize_fleet(cfg, &pinch)?;
            let details: Vec<_> = outcomes.iter().map(|o| (&o.row.device, &o.characterization)).collect();
            write_json(&out.join("characterize.json"), &report)?;
            write_json(&out.join("characterize_devices.json"), &details)?;
            write_text(&out.join("characterize.csv"), &report.to_csv())?;
            print_summaries(&report);
        }
        Command::Tune { device } => {
            let models = load_models(cfg)?;
            let specs = fleet_devices(cfg);
            let spec = match device {
                Some(i) => &specs[i - 1],
                None => match specs.iter().find(|d| d.faults == Default::default()) {
                    Some(d) => d,
                    None => bail!("the fleet has no fault-free device; pass --device"),
                },
            };
            let outcome = run_device(spec, 0, cfg, &models.pinchoff, &models.trio(), true);
            write_json(&out.join("tune").join(format!("{}.json", spec.id)), &outcome)?;
            let r = &outcome.row;
            println!(
                "{}: verdict {}, success {}, oracle {}, {} 1D / {} 2D",
                r.device,
                r.verdict,
                r.success.map_or("-".into(), |s| s.to_string()),
                r.oracle_regime.map_or("-".into(), |g| format!("{g:?}")),
                r.tuning_n_1d.unwrap_or(0),
                r.tuning_n_2d.unwrap_or(0)
            );
            if let Some(e) = &r.error {
                bail!("{}: {e}", r.device);
            }
        }
        Command::Fleet => {
            let models = load_models(cfg)?;
            let (report, outcomes) = run_fleet(cfg, &models, true)?;
            write_json(&out.join("fleet.json"), &report)?;
            write_text(&out.join("fleet.csv"), &report.to_csv())?;
            for o in &outcomes {
                let name = format!("c{}_{}.json", o.row.cooldown, o.row.device);
                write_json(&out.join("fleet").join(name), o)?;
            }
            print_summaries(&report);
        }
        Command::Fluctuation => {
            let records = read_corpus(cfg, cfg.fluctuation.task)?;
            let seed = dotune_core::derive_seed(cfg.seed, 300);
            let report = cfg.in_pool(|| run_fluctuation(&records, &cfg.fluctuation, seed))??;
            write_json(&out.join("fluctuation.json"), &report)?;
            for p in &report.points {
                println!(
                    "n = {:>3}: accuracy {:.4}, std {:.4}, spread of the mean {:.4}",
                    p.n, p.mean, p.std, p.mean_spread
                );
            }
        }
    }
    Ok(())
}

fn load_model(dir: &Path, task: Task) -> anyhow::Result<Model> {
    let path = dir.join(format!("{task}.json"));
    let s = std::fs::read_to_string(&path).with_context(|| format!("reading {}; run train first", path.display()))?;
    Ok(Model::from_json(&s)?)
}

fn load_models(cfg: &RunConfig) -> anyhow::Result<ModelSet> {
    ModelSet::load(&cfg.models_dir()).context("loading models; run train first")
}

fn print_summaries(report: &dotune_core::harness::FleetReport) {
    for c in &report.cooldowns {
        let s = &c.summary;
        println!(
            "cooldown {}: {} devices, {} failed i.q.a., {} broken, {} working, {} tuned, {} double dot, {} errors",
            c.cooldown, s.devices, s.failed_iqa, s.broken, s.working, s.tuned, s.double_dot, s.errors
        );
    }
}
