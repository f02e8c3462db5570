//! Binary classifiers written from scratch, their preprocessing and the
//! balanced redraw evaluation protocol.
//!
//! Label 1 is the positive class ("good" for quality tasks, double dot for the
//! regime task). Every prediction threshold is strict, so exact ties resolve
//! to label 0.

mod eval;
pub mod knn;
pub mod linear;
pub mod mlp;
mod model;
mod preprocess;
pub mod tree;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use eval::{
    accuracy, balanced_split, confusion_matrix, evaluate_redraws, expand_grid, grid_search, mean_std,
    moving_average, redraw_fluctuation_sweep, ConfusionMatrix, EvalReport, FluctuationPoint, GridResult,
    ParamGrid, MIN_CLASS_SIZE, TRAIN_FRACTION,
};
pub use model::{decide, train, train_on, Family, Hyperparams, Learner, Model};
pub use preprocess::{
    fft_magnitude, fft_magnitude_1d, Pca, Pipeline, PreprocessSpec, Representation, StandardScaler,
};

/// Anything that labels an input row as class 1 (`true`) or class 0.
pub trait BinaryClassifier: Sync {
    fn predict(&self, input: &[f64]) -> Result<bool>;
    fn input_width(&self) -> usize;
}

/// Shape of the rows a dataset holds before any representation is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InputKind {
    /// Hand-picked scalar features.
    Features { width: usize },
    /// A 1D trace resampled to `len` points.
    Trace { len: usize },
    /// A square `side × side` image, row-major.
    Image { side: usize },
}

impl InputKind {
    pub fn width(self) -> usize {
        match self {
            InputKind::Features { width } => width,
            InputKind::Trace { len } => len,
            InputKind::Image { side } => side * side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub input: InputKind,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub class_names: [String; 2],
}

impl Dataset {
    pub fn new(input: InputKind, rows: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        Self::with_names(input, rows, labels, ["bad".into(), "good".into()])
    }

    pub fn with_names(input: InputKind, rows: Vec<Vec<f64>>, labels: Vec<u8>, class_names: [String; 2]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        let w = input.width();
        if let Some(bad) = rows.iter().position(|r| r.len() != w) {
            return Err(Error::Shape(format!(
                "row {bad} has {} values, expected {w}",
                rows[bad].len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Dataset("labels must be 0 or 1".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Dataset("dataset contains non-finite values".into()));
        }
        Ok(Self {
            input,
            rows,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of rows labelled 0 and 1.
    pub fn class_counts(&self) -> [usize; 2] {
        let n1 = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - n1, n1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_shape_checks() {
        assert!(Dataset::new(InputKind::Features { width: 2 }, vec![vec![1.0]], vec![0]).is_err());
        assert!(Dataset::new(InputKind::Features { width: 1 }, vec![vec![1.0]], vec![2]).is_err());
        let d = Dataset::new(InputKind::Features { width: 1 }, vec![vec![1.0], vec![2.0]], vec![0, 1]).unwrap();
        assert_eq!(d.class_counts(), [1, 1]);
    }
}
