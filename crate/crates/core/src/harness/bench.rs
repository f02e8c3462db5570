use serde::{Deserialize, Serialize};

use super::{read_corpus, to_dataset, BenchConfig, FluctuationConfig, Record, RecordKind, RunConfig, Task};
use crate::ml::{evaluate_redraws, redraw_fluctuation_sweep, Family, FluctuationPoint, Hyperparams, PreprocessSpec, Representation};
use crate::{derive_seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: String,
    pub representation: String,
    pub pca: Option<usize>,
    pub redraws: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// Mean prediction time per sample; kept out of the JSON report.
    #[serde(skip)]
    pub eval_seconds: f64,
}

/// Every family × representation × PCA combination of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub task: Task,
    pub per_class: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Accuracy table, one line per row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,representation,pca,redraws,accuracy_mean,accuracy_std\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.family,
                r.representation,
                r.pca.map_or(String::new(), |k| k.to_string()),
                r.redraws,
                r.accuracy_mean,
                r.accuracy_std
            ));
        }
        s
    }

    /// Evaluation times, kept apart since they differ between runs.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("family,representation,pca,eval_microseconds_per_sample\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.3}\n",
                r.family,
                r.representation,
                r.pca.map_or(String::new(), |k| k.to_string()),
                r.eval_seconds * 1e6
            ));
        }
        s
    }

    /// Families ordered by their best accuracy on any representation.
    pub fn family_ranking(&self) -> Vec<(String, f64)> {
        let mut best: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            match best.iter_mut().find(|(f, _)| *f == r.family) {
                Some(b) => b.1 = b.1.max(r.accuracy_mean),
                None => best.push((r.family.clone(), r.accuracy_mean)),
            }
        }
        best.sort_by(|a, b| b.1.total_cmp(&a.1));
        best
    }
}

/// The first `max` records of each label.
fn subsample(records: &[Record], max: Option<usize>) -> Vec<Record> {
    let Some(max) = max else {
        return records.to_vec();
    };
    let mut seen = [0usize; 2];
    records
        .iter()
        .filter(|r| {
            let c = &mut seen[(r.label == 1) as usize];
            *c += 1;
            *c <= max
        })
        .cloned()
        .collect()
}

pub fn bench_classifiers(task: Task, records: &[Record], cfg: &BenchConfig, seed: u64) -> Result<BenchTable> {
    let records = subsample(records, cfg.max_per_class);
    let first = records.first().ok_or_else(|| Error::Dataset(format!("empty {task} corpus")))?;
    let (representations, redraws): (&[Representation], usize) = match first.kind {
        RecordKind::Pinchoff => (&Representation::ALL, cfg.redraws_1d),
        RecordKind::Segment => (
            &[Representation::Raw, Representation::Fourier, Representation::RawFourier],
            cfg.redraws_2d,
        ),
    };
    let per_class = records.iter().filter(|r| r.label == 1).count();
    let mut rows = Vec::new();
    for &rep in representations {
        let data = to_dataset(&records, rep)?;
        let width = rep.output_width(data.input);
        for pca in [None, Some(cfg.pca_components.min(width))] {
            let spec = PreprocessSpec::new(rep, pca);
            for (k, family) in Family::ALL.into_iter().enumerate() {
                let h = Hyperparams::default_for(family);
                let s = derive_seed(seed, k as u64);
                let r = evaluate_redraws(&data, &h, spec, redraws, s)?;
                rows.push(BenchRow {
                    family: family.name().into(),
                    representation: rep.name().into(),
                    pca,
                    redraws,
                    accuracy_mean: r.accuracy_mean,
                    accuracy_std: r.accuracy_std,
                    eval_seconds: r.eval_seconds,
                });
            }
        }
    }
    Ok(BenchTable { task, per_class, rows })
}

/// Benchmarks the corpus of `task` on disk inside the worker pool.
pub fn bench_task(cfg: &RunConfig, task: Task) -> Result<BenchTable> {
    let records = read_corpus(cfg, task)?;
    let seed = derive_seed(cfg.seed, 200 + task as u64);
    cfg.in_pool(|| bench_classifiers(task, &records, &cfg.bench, seed))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationReport {
    pub task: Task,
    pub family: String,
    pub preprocess: String,
    pub repeats: usize,
    pub points: Vec<FluctuationPoint>,
}

pub fn run_fluctuation(records: &[Record], cfg: &FluctuationConfig, seed: u64) -> Result<FluctuationReport> {
    let spec = cfg.model.preprocess;
    let data = to_dataset(records, spec.representation)?;
    let h = &cfg.model.hyperparams;
    let points = redraw_fluctuation_sweep(&data, h, spec, &cfg.n_list, cfg.repeats, seed)?;
    Ok(FluctuationReport {
        task: cfg.task,
        family: h.family().name().into(),
        preprocess: spec.label(),
        repeats: cfg.repeats,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::gen_dataset;

    #[test]
    fn pinchoff_bench_has_forty_rows() {
        let recs = gen_dataset(Task::Pinchoff, 12, 5).unwrap();
        let cfg = BenchConfig {
            redraws_1d: 2,
            pca_components: 3,
            ..BenchConfig::default()
        };
        let t = bench_classifiers(Task::Pinchoff, &recs, &cfg, 1).unwrap();
        assert_eq!(t.rows.len(), 40);
        assert!(t.rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy_mean) && r.accuracy_std >= 0.0));
        assert_eq!(t.to_csv().lines().count(), 41);
        assert_eq!(t.family_ranking().len(), 5);
    }

    #[test]
    fn subsample_keeps_the_first_of_each_label() {
        let recs = gen_dataset(Task::Pinchoff, 12, 5).unwrap();
        let s = subsample(&recs, Some(10));
        assert_eq!(s.len(), 20);
        assert_eq!(s[..4], recs[..4]);
    }
}
