//! Run orchestration: corpora, model training, device fleets and benchmarks.
//!
//! Everything a run does is a function of its [`RunConfig`] and master seed.
//! Reports are written as JSON (and CSV where tabular) under the output
//! directory; wall-clock timings never enter a JSON report.

mod bench;
mod dataset;
mod fleet;
mod training;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::characterize::CharacterizeConfig;
use crate::device::Gate;
use crate::ml::{Family, Hyperparams, PreprocessSpec, Representation};
use crate::tuner::TunerConfig;
use crate::{Error, Result};

pub use bench::{bench_classifiers, bench_task, run_fluctuation, BenchRow, BenchTable, FluctuationReport};
pub use dataset::{gen_dataset, read_jsonl, to_dataset, write_jsonl, Record, RecordKind, Task, TRACE_LEN};
pub use fleet::{
    characterize_fleet, fleet_devices, run_device, run_fleet, run_fleet_with, CooldownReport, DeviceOutcome, DeviceSpec, FleetReport, FleetRow,
    FleetSummary, FLEET_CSV_HEADER,
};
pub use training::{train_models, train_task, ModelSet, TrainedTask};

/// Complete description of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Size of the worker pool for fleets, corpora and evaluations.
    pub workers: usize,
    pub data: DataConfig,
    pub training: TrainingConfig,
    /// Directory holding the four model files; `<output_dir>/models` if unset.
    pub models_dir: Option<PathBuf>,
    pub fleet: FleetConfig,
    pub characterize: CharacterizeConfig,
    pub tuner: TunerConfig,
    pub bench: BenchConfig,
    pub fluctuation: FluctuationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            workers: 1,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            models_dir: None,
            fleet: FleetConfig::default(),
            characterize: CharacterizeConfig::default(),
            tuner: TunerConfig::default(),
            bench: BenchConfig::default(),
            fluctuation: FluctuationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub per_class: usize,
    /// Directory of the JSONL corpora; `<output_dir>/data` if unset.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_class: 2000,
            dir: None,
        }
    }
}

/// Model family, hyperparameters and preprocessing of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskModel {
    pub hyperparams: Hyperparams,
    pub preprocess: PreprocessSpec,
    /// Redraws of the accompanying evaluation.
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub pinchoff: TaskModel,
    pub single_dot: TaskModel,
    pub double_dot: TaskModel,
    pub regime: TaskModel,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let tile = TaskModel {
            hyperparams: Hyperparams::default_for(Family::Mlp),
            preprocess: PreprocessSpec::new(Representation::Fourier, Some(40)),
            redraws: 10,
        };
        Self {
            pinchoff: TaskModel {
                hyperparams: Hyperparams::default_for(Family::DecisionTree),
                preprocess: PreprocessSpec::new(Representation::Features, None),
                redraws: 20,
            },
            single_dot: tile.clone(),
            double_dot: tile.clone(),
            regime: tile,
        }
    }
}

impl TrainingConfig {
    pub fn task(&self, task: Task) -> &TaskModel {
        match task {
            Task::Pinchoff => &self.pinchoff,
            Task::SingleDot => &self.single_dot,
            Task::DoubleDot => &self.double_dot,
            Task::Regime => &self.regime,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    /// Devices in the fleet, faulted ones included.
    pub count: usize,
    pub dead_channel: usize,
    pub unresponsive: usize,
    pub unresponsive_gate: Gate,
    pub offset_charge: usize,
    /// Independent noise realizations of the whole fleet.
    pub cooldowns: usize,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            count: 12,
            dead_channel: 0,
            unresponsive: 0,
            unresponsive_gate: Gate::TB,
            offset_charge: 0,
            cooldowns: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub tasks: Vec<Task>,
    /// Records per class drawn from each corpus; all of them if unset.
    pub max_per_class: Option<usize>,
    pub redraws_1d: usize,
    pub redraws_2d: usize,
    pub pca_components: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tasks: Task::ALL.to_vec(),
            max_per_class: Some(300),
            redraws_1d: 20,
            redraws_2d: 10,
            pca_components: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluctuationConfig {
    pub task: Task,
    pub model: TaskModel,
    pub n_list: Vec<usize>,
    pub repeats: usize,
}

impl Default for FluctuationConfig {
    fn default() -> Self {
        Self {
            task: Task::Pinchoff,
            model: TrainingConfig::default().pinchoff,
            n_list: vec![2, 5, 10, 20],
            repeats: 20,
        }
    }
}

impl RunConfig {
    /// Parses and validates a JSON configuration.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.data.per_class < 10 {
            return Err(Error::Config("data.per_class must be at least 10".into()));
        }
        let f = &self.fleet;
        if f.dead_channel + f.unresponsive + f.offset_charge > f.count {
            return Err(Error::Config(format!(
                "fleet of {} cannot hold {} faulted devices",
                f.count,
                f.dead_channel + f.unresponsive + f.offset_charge
            )));
        }
        if f.cooldowns == 0 {
            return Err(Error::Config("fleet.cooldowns must be at least 1".into()));
        }
        for task in Task::ALL {
            let m = self.training.task(task);
            if m.redraws == 0 {
                return Err(Error::Config(format!("training.{task}.redraws must be at least 1")));
            }
            if matches!(m.preprocess.pca, Some(k) if k == 0 || k > self.data.per_class) {
                return Err(Error::Config(format!(
                    "training.{task}.preprocess.pca must lie in 1..={} (data.per_class)",
                    self.data.per_class
                )));
            }
            let want_features = task == Task::Pinchoff;
            let is_features = m.preprocess.representation == Representation::Features;
            if is_features && !want_features {
                return Err(Error::Config(format!("training.{task} cannot use hand-picked features")));
            }
        }
        let b = &self.bench;
        if b.redraws_1d == 0 || b.redraws_2d == 0 || b.pca_components == 0 {
            return Err(Error::Config("bench redraws and pca_components must be positive".into()));
        }
        if matches!(b.max_per_class, Some(m) if m < 10) {
            return Err(Error::Config("bench.max_per_class must be at least 10".into()));
        }
        let fl = &self.fluctuation;
        if fl.n_list.is_empty() || fl.n_list.contains(&0) || fl.repeats == 0 {
            return Err(Error::Config("fluctuation needs positive redraw counts and repeats".into()));
        }
        self.characterize.validate()?;
        self.tuner.validate()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.models_dir.clone().unwrap_or_else(|| self.output_dir.join("models"))
    }

    pub fn dataset_path(&self, task: Task) -> PathBuf {
        self.data_dir().join(format!("{task}.jsonl"))
    }

    /// Runs `f` inside a pool of `workers` threads.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Generates the four corpora and writes them to `data_dir`.
pub fn generate_corpora(cfg: &RunConfig) -> Result<Vec<(Task, usize)>> {
    let mut out = Vec::with_capacity(Task::ALL.len());
    for task in Task::ALL {
        let records = cfg.in_pool(|| gen_dataset(task, cfg.data.per_class, cfg.seed))??;
        write_jsonl(&cfg.dataset_path(task), &records)?;
        out.push((task, records.len()));
    }
    Ok(out)
}

/// Reads the corpus of `task` from `data_dir`.
pub fn read_corpus(cfg: &RunConfig, task: Task) -> Result<Vec<Record>> {
    let path = cfg.dataset_path(task);
    if !path.exists() {
        return Err(Error::Dataset(format!("{} does not exist; run gen-data first", path.display())));
    }
    read_jsonl(&path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
