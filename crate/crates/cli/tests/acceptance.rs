//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dotune_core::charge_map::{acquire_diagram, boundary_averages, ChargeMapConfig, Termination};
use dotune_core::device::{new_random_device, Device, Gate, VoltagePlanner, VoltageRange};
use dotune_core::harness::{
    gen_dataset, run_fleet, run_fluctuation, train_task, FleetConfig, FluctuationConfig, ModelSet, Record, RunConfig,
    Task, TrainingConfig,
};
use dotune_core::ml::{accuracy, ConfusionMatrix};
use dotune_core::pinchoff::{analyze, extract_voltages, fit_tanh, normalize_and_canonicalize, DEFAULT_SMOOTHING};
use dotune_core::tuner::{voltage_delta, Direction, TunerConfig};
use dotune_core::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, start: Instant, o: Outcome) -> bool {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!(
        "{tag} [{id:>2}] {name}: {} ({:.1} s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.pass
}

fn accuracy_arithmetic() -> Outcome {
    let start = Instant::now();
    let cases = [
        (ConfusionMatrix::new(70.98, 8.24, 4.71, 74.07), 0.9181),
        (ConfusionMatrix::new(129.5, 29.25, 28.05, 128.2), 0.8181),
        (ConfusionMatrix::new(37.72, 3.84, 5.6, 35.84), 0.8863),
        (ConfusionMatrix::new(33.95, 7.45, 5.65, 35.95), 0.8422),
    ];
    let got: Vec<f64> = cases.iter().map(|(cm, _)| accuracy(cm).unwrap()).collect();
    let worst = got.iter().zip(&cases).map(|(g, (_, w))| (g - w).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 5e-4 && secs < 1.0,
        format!("accuracies {got:.4?}, worst deviation {worst:.1e}"),
    )
}

/// `a (1 + tanh(b x + c))` on 201 setpoints of a gate swept over [-1, 0] V.
fn tanh_trace(a: f64, b: f64, c: f64, noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> dotune_core::pinchoff::Trace {
    let n = 201;
    let setpoints: Vec<f64> = (0..n).map(|i| -1.0 + i as f64 / (n - 1) as f64).collect();
    let mut currents: Vec<f64> = (0..n)
        .map(|i| a * (1.0 + (b * i as f64 / (n - 1) as f64 + c).tanh()))
        .collect();
    if let Some((dist, rng)) = noise {
        for v in &mut currents {
            *v += dist.sample(rng);
        }
    }
    normalize_and_canonicalize(Gate::LB, &setpoints, &currents, 1.0).unwrap()
}

fn random_curve(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let a = rng.gen_range(0.2..0.5);
    let b = rng.gen_range(5.0..30.0);
    let c = -b * rng.gen_range(0.3..0.7);
    (a, b, c)
}

fn fit_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, 2));
    let rel = |got: f64, want: f64| ((got - want) / want).abs();
    let mut exact = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    for _ in 0..100 {
        let (a, b, c) = random_curve(&mut rng);
        let f = fit_tanh(&tanh_trace(a, b, c, None));
        let r = rel(f.a, a).max(rel(f.b, b)).max(rel(f.c, c));
        worst_rel = worst_rel.max(r);
        worst_res = worst_res.max(f.residual_norm);
        if r <= 1e-4 && f.residual_norm <= 1e-8 {
            exact += 1;
        }
    }
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut close = 0;
    for _ in 0..100 {
        let (a, b, c) = random_curve(&mut rng);
        let f = fit_tanh(&tanh_trace(a, b, c, Some((&noise, &mut rng))));
        if rel(f.a, a) <= 0.05 {
            close += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        exact == 100 && close >= 95 && secs < 10.0,
        format!(
            "noiseless {exact}/100 (worst relative error {worst_rel:.1e}, residual {worst_res:.1e}); noisy a within 5% on {close}/100"
        ),
    )
}

/// Transition voltages of the analytic curve from central differences on a
/// grid 100 times finer than the sampled trace.
fn dense_oracle(a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let n = 20_001;
    let h = 1.0 / (n - 1) as f64;
    let f = |x: f64| a * (1.0 + (b * x + c).tanh());
    let v = |x: f64| x - 1.0;
    let (mut it, mut best_slope) = (0, f64::NEG_INFINITY);
    let (mut ih, mut best_d2) = (0, f64::INFINITY);
    for i in 1..n - 1 {
        let x = i as f64 * h;
        let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
        let d2 = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
        if d1 > best_slope {
            best_slope = d1;
            it = i;
        }
        if d2 < best_d2 {
            best_d2 = d2;
            ih = i;
        }
    }
    let xt = it as f64 * h;
    let v_l = (xt - f(xt) / best_slope).clamp(0.0, 1.0);
    (v(v_l), v(xt), v(ih as f64 * h))
}

fn extraction_oracle(corpus: &[Record]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, 3));
    let step = 1.0 / 200.0;
    let mut matched = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b, c) = random_curve(&mut rng);
        let got = extract_voltages(&tanh_trace(a, b, c, None)).unwrap();
        let (l, t, h) = dense_oracle(a, b, c);
        let d = (got.v_l - l).abs().max((got.v_t - t).abs()).max((got.v_h - h).abs());
        worst = worst.max(d);
        if d <= step + 1e-12 {
            matched += 1;
        }
    }
    let good: Vec<&Record> = corpus.iter().filter(|r| r.label == 1).collect();
    let ordered = good
        .iter()
        .filter(|r| {
            let cur = r.trace.as_ref().unwrap();
            let s: Vec<f64> = (0..cur.len()).map(|i| i as f64 / (cur.len() - 1) as f64).collect();
            let t = normalize_and_canonicalize(Gate::LB, &s, cur, 1.0).unwrap();
            analyze(&t, DEFAULT_SMOOTHING).is_ok_and(|f| f.v_l < f.v_t && f.v_t < f.v_h)
        })
        .count();
    let share = ordered as f64 / good.len() as f64;
    verdict(
        matched == 100 && share >= 0.99,
        format!(
            "{matched}/100 within one grid step (worst {:.2} steps); v_L < v_T < v_H on {ordered}/{} good traces",
            worst / step,
            good.len()
        ),
    )
}

fn voltage_delta_table() -> Outcome {
    let cfg = TunerConfig::default();
    let range = VoltageRange::new(-2.0, 0.0);
    let got = [
        voltage_delta(-1.0, range, Direction::TooLow, &cfg),
        voltage_delta(-0.1, range, Direction::TooHigh, &cfg),
        voltage_delta(-0.04, range, Direction::TooLow, &cfg),
    ];
    let want = [-0.9, -0.2, 0.0];
    verdict(got == want, format!("got {got:?}, expected {want:?}"))
}

struct Trained {
    corpora: Vec<(Task, Vec<Record>)>,
    models: ModelSet,
}

fn classifier_floor() -> (Outcome, Trained) {
    let start = Instant::now();
    let training = TrainingConfig::default();
    let mut corpora = Vec::new();
    let mut trained = Vec::new();
    let mut lines = Vec::new();
    let mut pass = true;
    for task in Task::ALL {
        let records = gen_dataset(task, 2000, SEED).unwrap();
        let spec = training.task(task);
        let t = train_task(task, &records, spec, derive_seed(SEED, 100 + task as u64)).unwrap();
        let floor = if task == Task::Pinchoff { 0.90 } else { 0.80 };
        pass &= t.eval.accuracy_mean >= floor && t.eval.n == spec.redraws;
        lines.push(format!("{task} {:.4} (n={})", t.eval.accuracy_mean, t.eval.n));
        corpora.push((task, records));
        trained.push(t);
    }
    let secs = start.elapsed().as_secs_f64();
    let models = ModelSet::from_trained(trained).unwrap();
    (
        verdict(pass && secs < 300.0, lines.join(", ")),
        Trained { corpora, models },
    )
}

fn closed_loop(models: &ModelSet) -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig {
        seed: SEED,
        fleet: FleetConfig {
            count: 50,
            ..FleetConfig::default()
        },
        tuner: TunerConfig {
            max_2d: 10,
            ..TunerConfig::default()
        },
        ..RunConfig::default()
    };
    let (report, outcomes) = run_fleet(&cfg, models, true).unwrap();
    let s = &report.cooldowns[0].summary;
    let violations = outcomes
        .iter()
        .filter(|o| o.row.error.as_deref().is_some_and(|e| e.contains("safety violation")))
        .count();
    let within = outcomes.iter().all(|o| o.row.tuning_n_2d.is_none_or(|n| n <= 10));
    let share = s.double_dot as f64 / s.devices as f64;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        share >= 0.8 && s.errors == 0 && violations == 0 && within && secs < 600.0,
        format!(
            "{}/{} reach an oracle-confirmed double dot, {} errors, {violations} safety violations",
            s.double_dot, s.devices, s.errors
        ),
    )
}

fn fault_triage(models: &ModelSet) -> Outcome {
    let cfg = RunConfig {
        seed: derive_seed(SEED, 7),
        fleet: FleetConfig {
            count: 8,
            dead_channel: 2,
            unresponsive: 1,
            unresponsive_gate: Gate::TB,
            ..FleetConfig::default()
        },
        ..RunConfig::default()
    };
    let (report, _) = run_fleet(&cfg, models, true).unwrap();
    let s = &report.cooldowns[0].summary;
    let rows: Vec<_> = report.rows().collect();
    let right = rows[..2].iter().all(|r| r.verdict == "failed_iqa") && rows[2].verdict == "broken";
    let attempts = rows.iter().filter(|r| r.success.is_some()).count();
    verdict(
        s.failed_iqa == 2 && s.broken == 1 && right && attempts == 5,
        format!(
            "{} failed_iqa, {} broken, {} working, {attempts} tuning attempts",
            s.failed_iqa, s.broken, s.working
        ),
    )
}

fn boundary_loop() -> Outcome {
    let cfg = ChargeMapConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SEED, 8));
    let mut ok = 0;
    let mut counts = [0usize; 3];
    for k in 0..20u64 {
        let physics = new_random_device(derive_seed(SEED, 800 + k), None);
        let v = VoltagePlanner::new(&physics).double_dot_fixture().unwrap();
        let safety = physics.layout.safety;
        let mut device = Device::new(physics, derive_seed(SEED, 900 + k));
        device.measure_a_max_safe_max().unwrap();
        device.set_voltages(&v).unwrap();
        let mut window = |c: f64, r: VoltageRange| {
            let c = c + rng.gen_range(-0.1..0.1);
            (r.clamp(c - 0.15), r.clamp(c + 0.15))
        };
        let lp = window(v.lp, safety.lp);
        let rp = window(v.rp, safety.rp);
        let acq = acquire_diagram(&mut device, lp, rp, &cfg, 10).unwrap();
        let adjustments = acq.history.len() - 1;
        let good = match acq.termination {
            Termination::InWindow => {
                counts[0] += 1;
                boundary_averages(&acq.map).all_within(cfg.current_window)
            }
            Termination::SafetyLimit => {
                counts[1] += 1;
                true
            }
            Termination::MaxIterations => {
                counts[2] += 1;
                false
            }
        };
        if good && adjustments <= 10 {
            ok += 1;
        }
    }
    verdict(
        ok == 20,
        format!(
            "{ok}/20 fixtures; {} in window, {} at a safety limit, {} out of iterations",
            counts[0], counts[1], counts[2]
        ),
    )
}

fn fluctuation_trend(corpus: &[Record]) -> Outcome {
    let cfg = FluctuationConfig::default();
    let r = run_fluctuation(corpus, &cfg, derive_seed(SEED, 9)).unwrap();
    let spread: Vec<f64> = r.points.iter().map(|p| p.mean_spread).collect();
    let ma: Vec<f64> = spread.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let pass = ma.windows(2).all(|w| w[1] <= w[0]) && r.points.iter().map(|p| p.n).eq([2, 5, 10, 20]);
    verdict(pass, format!("spread over n = 2, 5, 10, 20: {spread:.5?}; moving average {ma:.5?}"))
}

fn dotune(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dotune")).args(args).output().expect("binary runs")
}

fn json_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        r#"{"seed": 3, "data": {"per_class": 40},
            "fleet": {"count": 4, "dead_channel": 1},
            "bench": {"tasks": ["pinchoff", "double_dot"], "redraws_1d": 2, "redraws_2d": 2, "pca_components": 4},
            "fluctuation": {"n_list": [2, 4], "repeats": 2}}"#,
    )
    .unwrap();
    let commands = ["gen-data", "train", "bench", "characterize", "tune", "fleet", "fluctuation"];
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for cmd in commands {
            let o = dotune(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            if !o.status.success() {
                return verdict(false, format!("{cmd} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let files = json_files(&a);
    if files != json_files(&b) {
        return verdict(false, "the two runs wrote different report sets");
    }
    let differing: Vec<String> = files
        .iter()
        .filter(|p| fs::read(a.join(p)).unwrap() != fs::read(b.join(p)).unwrap())
        .map(|p| p.display().to_string())
        .collect();
    verdict(
        differing.is_empty() && !files.is_empty(),
        format!(
            "{} JSON reports from {} commands, {} differ {differing:?}",
            files.len(),
            commands.len(),
            differing.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags; only a filter that excludes us matters.
    if std::env::args().skip(1).any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "accuracy arithmetic", t, accuracy_arithmetic());
    let t = Instant::now();
    all &= report(2, "tanh fit oracle", t, fit_oracle());
    let t = Instant::now();
    all &= report(4, "voltage delta table", t, voltage_delta_table());

    let t = Instant::now();
    let (floor, trained) = classifier_floor();
    all &= report(5, "classifier floor", t, floor);
    let pinch = &trained.corpora.iter().find(|(k, _)| *k == Task::Pinchoff).unwrap().1;

    let t = Instant::now();
    all &= report(3, "voltage extraction oracle", t, extraction_oracle(pinch));
    let t = Instant::now();
    all &= report(6, "closed loop", t, closed_loop(&trained.models));
    let t = Instant::now();
    all &= report(7, "fault triage", t, fault_triage(&trained.models));
    let t = Instant::now();
    all &= report(8, "boundary loop", t, boundary_loop());
    let t = Instant::now();
    all &= report(9, "redraw fluctuation trend", t, fluctuation_trend(pinch));
    let t = Instant::now();
    all &= report(10, "determinism", t, determinism());

    if !all {
        eprintln!("acceptance: at least one criterion failed");
        std::process::exit(1);
    }
}
