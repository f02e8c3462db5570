//! Confusion matrices, the balanced redraw protocol and grid search.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{train_on, Hyperparams};
use super::preprocess::PreprocessSpec;
use super::Dataset;
use crate::{derive_seed, Error, Result};

/// Fraction of each balanced redraw used for training.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Minimum examples per class for the redraw protocol.
pub const MIN_CLASS_SIZE: usize = 5;

/// Counts with label 1 as the positive class. Averaged matrices hold
/// fractional counts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub tn: f64,
}

impl ConfusionMatrix {
    pub fn new(tp: f64, fp: f64, fn_: f64, tn: f64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> f64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion_matrix(truth: &[u8], predicted: &[u8]) -> Result<ConfusionMatrix> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("confusion matrix of no samples".into()));
    }
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "{} labels against {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (1, 1) => cm.tp += 1.0,
            (0, 1) => cm.fp += 1.0,
            (1, 0) => cm.fn_ += 1.0,
            _ => cm.tn += 1.0,
        }
    }
    Ok(cm)
}

/// `(TP + TN) / (TP + FP + FN + TN)`.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("accuracy of an empty confusion matrix".into()));
    }
    Ok((cm.tp + cm.tn) / total)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub family: String,
    pub preprocess: String,
    pub n: usize,
    pub split: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy_mean: f64,
    /// Population standard deviation over the redraws.
    pub accuracy_std: f64,
    /// Standard error of the mean using the sample standard deviation.
    pub accuracy_sem: f64,
    pub accuracies: Vec<f64>,
    pub confusion: ConfusionMatrix,
    /// Mean wall-clock prediction time per test sample; never serialized so
    /// reports stay reproducible.
    #[serde(skip)]
    pub eval_seconds: f64,
}

/// Balanced, stratified train/test indices for one redraw.
pub fn balanced_split(data: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[(l == 1) as usize].push(i);
    }
    let m = by_class[0].len().min(by_class[1].len());
    if m < MIN_CLASS_SIZE {
        return Err(Error::Dataset(format!(
            "each class needs at least {MIN_CLASS_SIZE} examples, smallest has {m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (m as f64 * TRAIN_FRACTION).round() as usize;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in by_class.iter_mut() {
        class.shuffle(&mut rng);
        train.extend_from_slice(&class[..n_train]);
        test.extend_from_slice(&class[n_train..m]);
    }
    train.shuffle(&mut rng);
    Ok((train, test))
}

struct Redraw {
    accuracy: f64,
    cm: ConfusionMatrix,
    train: usize,
    test: usize,
    seconds: f64,
}

fn one_redraw(data: &Dataset, h: &Hyperparams, spec: PreprocessSpec, seed: u64) -> Result<Redraw> {
    let (train, test) = balanced_split(data, seed)?;
    let model = train_on(data, &train, &h.reseeded(derive_seed(seed, 1)), spec)?;
    let rows: Vec<&[f64]> = test.iter().map(|&i| data.rows[i].as_slice()).collect();
    let start = std::time::Instant::now();
    let pred = model.predict_batch(&rows)?;
    let seconds = start.elapsed().as_secs_f64() / rows.len().max(1) as f64;
    let truth: Vec<u8> = test.iter().map(|&i| data.labels[i]).collect();
    let cm = confusion_matrix(&truth, &pred)?;
    Ok(Redraw {
        accuracy: accuracy(&cm)?,
        cm,
        train: train.len(),
        test: test.len(),
        seconds,
    })
}

/// Mean test accuracy over `n` balanced 80/20 redraws. Preprocessing is
/// fitted on each redraw's training rows only.
pub fn evaluate_redraws(data: &Dataset, h: &Hyperparams, spec: PreprocessSpec, n: usize, seed: u64) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one redraw is required".into()));
    }
    spec.validate(data.input)?;
    let draws: Vec<Redraw> = (0..n as u64)
        .into_par_iter()
        .map(|r| one_redraw(data, h, spec, derive_seed(seed, r)))
        .collect::<Result<_>>()?;
    let accuracies: Vec<f64> = draws.iter().map(|d| d.accuracy).collect();
    let (mean, std) = mean_std(&accuracies);
    let sem = if n > 1 {
        let sample_var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (sample_var / n as f64).sqrt()
    } else {
        0.0
    };
    let k = n as f64;
    let confusion = draws.iter().fold(ConfusionMatrix::default(), |acc, d| ConfusionMatrix {
        tp: acc.tp + d.cm.tp / k,
        fp: acc.fp + d.cm.fp / k,
        fn_: acc.fn_ + d.cm.fn_ / k,
        tn: acc.tn + d.cm.tn / k,
    });
    Ok(EvalReport {
        family: h.family().name().to_string(),
        preprocess: spec.label(),
        n,
        split: TRAIN_FRACTION,
        train_size: draws[0].train,
        test_size: draws[0].test,
        accuracy_mean: mean,
        accuracy_std: std,
        accuracy_sem: sem,
        accuracies,
        confusion,
        eval_seconds: draws.iter().map(|d| d.seconds).sum::<f64>() / k,
    })
}

/// Parameter name → candidate values. Keys are expanded in sorted order with
/// the last key varying fastest.
pub type ParamGrid = BTreeMap<String, Vec<serde_json::Value>>;

pub fn expand_grid(base: &Hyperparams, grid: &ParamGrid) -> Result<Vec<Hyperparams>> {
    let mut out = vec![base.clone()];
    for (key, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid entry {key:?} has no values")));
        }
        let mut next = Vec::with_capacity(out.len() * values.len());
        for h in &out {
            for v in values {
                next.push(h.with_param(key, v)?);
            }
        }
        out = next;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: Hyperparams,
    pub best_accuracy: f64,
    pub evaluations: Vec<(Hyperparams, f64)>,
}

/// Exhaustive search on one fixed balanced split; the first candidate wins
/// ties.
pub fn grid_search(data: &Dataset, base: &Hyperparams, grid: &ParamGrid, spec: PreprocessSpec, seed: u64) -> Result<GridResult> {
    let candidates = expand_grid(base, grid)?;
    let split_seed = derive_seed(seed, 0);
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|h| one_redraw(data, h, spec, split_seed).map(|r| r.accuracy))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(GridResult {
        best: candidates[best].clone(),
        best_accuracy: scores[best],
        evaluations: candidates.into_iter().zip(scores).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationPoint {
    pub n: usize,
    pub mean: f64,
    /// Spread of the individual redraw accuracies.
    pub std: f64,
    pub sem: f64,
    /// Standard deviation of the mean accuracy over repeated, independently
    /// seeded `n`-redraw evaluations; zero with a single repeat.
    pub mean_spread: f64,
}

/// Accuracy statistics as a function of the number of redraws. The first
/// repeat uses `seed` itself, so `repeats = 1` gives the plain evaluation.
pub fn redraw_fluctuation_sweep(
    data: &Dataset,
    h: &Hyperparams,
    spec: PreprocessSpec,
    n_list: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<FluctuationPoint>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("at least one repeat is required".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let first = evaluate_redraws(data, h, spec, n, seed)?;
            let mut means = vec![first.accuracy_mean];
            for r in 1..repeats as u64 {
                means.push(evaluate_redraws(data, h, spec, n, derive_seed(seed, r))?.accuracy_mean);
            }
            Ok(FluctuationPoint {
                n,
                mean: first.accuracy_mean,
                std: first.accuracy_std,
                sem: first.accuracy_sem,
                mean_spread: mean_std(&means).1,
            })
        })
        .collect()
}

/// Centred moving average over `window` consecutive values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
