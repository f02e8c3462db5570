use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_corpus, to_dataset, write_json, Record, RunConfig, Task, TaskModel};
use crate::ml::{evaluate_redraws, train, EvalReport, Model};
use crate::tuner::ClassifierTrio;
use crate::{derive_seed, Error, Result};

/// A trained model together with its redraw evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTask {
    pub task: Task,
    pub eval: EvalReport,
    pub model: Model,
}

/// Evaluates `spec` on `records` over its redraws, then fits the final model
/// on every record.
pub fn train_task(task: Task, records: &[Record], spec: &TaskModel, seed: u64) -> Result<TrainedTask> {
    let data = to_dataset(records, spec.preprocess.representation)?;
    let h = spec.hyperparams.reseeded(derive_seed(seed, 1));
    let eval = evaluate_redraws(&data, &h, spec.preprocess, spec.redraws, derive_seed(seed, 2))?;
    let model = train(&data, &h, spec.preprocess)?;
    Ok(TrainedTask { task, eval, model })
}

/// Trains all four tasks from the corpora on disk and writes
/// `models/<task>.json` plus `eval/<task>.json`.
pub fn train_models(cfg: &RunConfig) -> Result<Vec<TrainedTask>> {
    let mut out = Vec::with_capacity(4);
    for task in Task::ALL {
        let records = read_corpus(cfg, task)?;
        let seed = derive_seed(cfg.seed, 100 + task as u64);
        let t = cfg.in_pool(|| train_task(task, &records, cfg.training.task(task), seed))??;
        write_json(&cfg.models_dir().join(format!("{task}.json")), &t.model)?;
        write_json(&cfg.output_dir.join("eval").join(format!("{task}.json")), &t.eval)?;
        out.push(t);
    }
    Ok(out)
}

/// The four models the characterization and tuning stages consume.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub pinchoff: Model,
    pub single_dot: Model,
    pub double_dot: Model,
    pub regime: Model,
}

impl ModelSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |task: Task| -> Result<Model> {
            let path = dir.join(format!("{task}.json"));
            let s = std::fs::read_to_string(&path).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
            Model::from_json(&s)
        };
        Ok(Self {
            pinchoff: read(Task::Pinchoff)?,
            single_dot: read(Task::SingleDot)?,
            double_dot: read(Task::DoubleDot)?,
            regime: read(Task::Regime)?,
        })
    }

    pub fn from_trained(tasks: Vec<TrainedTask>) -> Result<Self> {
        let mut slots: [Option<Model>; 4] = Default::default();
        for t in tasks {
            slots[t.task as usize] = Some(t.model);
        }
        let [p, s, d, r] = slots;
        let missing = |task: Task| Error::Model(format!("no {task} model"));
        Ok(Self {
            pinchoff: p.ok_or_else(|| missing(Task::Pinchoff))?,
            single_dot: s.ok_or_else(|| missing(Task::SingleDot))?,
            double_dot: d.ok_or_else(|| missing(Task::DoubleDot))?,
            regime: r.ok_or_else(|| missing(Task::Regime))?,
        })
    }

    pub fn trio(&self) -> ClassifierTrio<'_> {
        ClassifierTrio {
            single: &self.single_dot,
            double: &self.double_dot,
            regime: &self.regime,
        }
    }
}
