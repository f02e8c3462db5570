use serde::{Deserialize, Serialize};

use super::knn::{Knn, KnnParams};
use super::linear::{LogisticParams, LogisticRegression};
use super::mlp::{Mlp, MlpParams};
use super::preprocess::{Pipeline, PreprocessSpec};
use super::tree::{DecisionTree, ForestParams, RandomForest, TreeParams};
use super::{BinaryClassifier, Dataset, InputKind};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    DecisionTree,
    RandomForest,
    Knn,
    LogisticRegression,
    Mlp,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::DecisionTree,
        Family::RandomForest,
        Family::Knn,
        Family::LogisticRegression,
        Family::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::DecisionTree => "Decision Tree",
            Family::RandomForest => "Random Forest",
            Family::Knn => "k-Nearest Neighbors",
            Family::LogisticRegression => "Logistic Regression",
            Family::Mlp => "Multilayer Perceptron",
        }
    }
}

/// Family tag plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum Hyperparams {
    DecisionTree(TreeParams),
    RandomForest(ForestParams),
    Knn(KnnParams),
    LogisticRegression(LogisticParams),
    Mlp(MlpParams),
}

impl Hyperparams {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::DecisionTree => Hyperparams::DecisionTree(TreeParams::default()),
            Family::RandomForest => Hyperparams::RandomForest(ForestParams::default()),
            Family::Knn => Hyperparams::Knn(KnnParams::default()),
            Family::LogisticRegression => Hyperparams::LogisticRegression(LogisticParams::default()),
            Family::Mlp => Hyperparams::Mlp(MlpParams::default()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Hyperparams::DecisionTree(_) => Family::DecisionTree,
            Hyperparams::RandomForest(_) => Family::RandomForest,
            Hyperparams::Knn(_) => Family::Knn,
            Hyperparams::LogisticRegression(_) => Family::LogisticRegression,
            Hyperparams::Mlp(_) => Family::Mlp,
        }
    }

    /// Same hyperparameters with the random stream replaced.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut h = self.clone();
        match &mut h {
            Hyperparams::DecisionTree(p) => p.seed = seed,
            Hyperparams::RandomForest(p) => p.seed = seed,
            Hyperparams::Mlp(p) => p.seed = seed,
            Hyperparams::Knn(_) | Hyperparams::LogisticRegression(_) => {}
        }
        h
    }

    /// Distance- and gradient-based learners see standardized inputs.
    pub fn wants_scaling(&self) -> bool {
        matches!(
            self,
            Hyperparams::Knn(_) | Hyperparams::LogisticRegression(_) | Hyperparams::Mlp(_)
        )
    }

    /// Sets one named parameter from a JSON value.
    pub fn with_param(&self, key: &str, value: &serde_json::Value) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let params = v
            .get_mut("params")
            .and_then(|p| p.as_object_mut())
            .ok_or_else(|| Error::Config("hyperparameters are not an object".into()))?;
        if !params.contains_key(key) {
            return Err(Error::Config(format!(
                "{} has no hyperparameter {key:?}",
                self.family().name()
            )));
        }
        params.insert(key.to_string(), value.clone());
        Ok(serde_json::from_value(v)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "state", rename_all = "snake_case")]
pub enum Learner {
    DecisionTree(DecisionTree),
    RandomForest(RandomForest),
    Knn(Knn),
    LogisticRegression(LogisticRegression),
    Mlp(Mlp),
}

impl Learner {
    fn proba(&self, row: &[f64]) -> f64 {
        match self {
            Learner::DecisionTree(m) => m.proba(row),
            Learner::RandomForest(m) => m.proba(row),
            Learner::Knn(m) => m.proba(row),
            Learner::LogisticRegression(m) => m.proba(row),
            Learner::Mlp(m) => m.proba(row),
        }
    }
}

/// A trained classifier together with its fitted preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    pub schema_version: u32,
    pub hyperparams: Hyperparams,
    pub pipeline: Pipeline,
    pub class_names: [String; 2],
    pub learner: Learner,
}

/// Label from a class-1 score; exact ties go to label 0.
pub fn decide(p1: f64) -> u8 {
    (p1 > 0.5) as u8
}

pub fn train(data: &Dataset, h: &Hyperparams, spec: PreprocessSpec) -> Result<Model> {
    let idx: Vec<usize> = (0..data.len()).collect();
    train_on(data, &idx, h, spec)
}

/// Trains on the rows of `data` selected by `idx`.
pub fn train_on(data: &Dataset, idx: &[usize], h: &Hyperparams, spec: PreprocessSpec) -> Result<Model> {
    let y: Vec<u8> = idx.iter().map(|&i| data.labels[i]).collect();
    let n1 = y.iter().filter(|&&l| l == 1).count();
    if n1 < 2 || y.len() - n1 < 2 {
        return Err(Error::Dataset(format!(
            "training needs at least 2 examples per class, got {} and {n1}",
            y.len() - n1
        )));
    }
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.rows[i].clone()).collect();
    let (pipeline, x) = Pipeline::fit(spec, data.input, &rows, h.wants_scaling())?;
    let learner = match h {
        Hyperparams::DecisionTree(p) => Learner::DecisionTree(DecisionTree::fit(&x, &y, p)),
        Hyperparams::RandomForest(p) => Learner::RandomForest(RandomForest::fit(&x, &y, p)),
        Hyperparams::Knn(p) => Learner::Knn(Knn::fit(&x, &y, p)),
        Hyperparams::LogisticRegression(p) => Learner::LogisticRegression(LogisticRegression::fit(&x, &y, p)),
        Hyperparams::Mlp(p) => Learner::Mlp(Mlp::fit(&x, &y, p)),
    };
    Ok(Model {
        schema_version: Model::SCHEMA_VERSION,
        hyperparams: h.clone(),
        pipeline,
        class_names: data.class_names.clone(),
        learner,
    })
}

impl Model {
    pub const SCHEMA_VERSION: u32 = 1;

    pub fn family(&self) -> Family {
        self.hyperparams.family()
    }

    pub fn input(&self) -> InputKind {
        self.pipeline.input
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<f64> {
        let x = self.pipeline.transform(row)?;
        Ok(self.learner.proba(&x))
    }

    pub fn predict(&self, row: &[f64]) -> Result<u8> {
        Ok(decide(self.predict_proba(row)?))
    }

    pub fn predict_batch(&self, rows: &[&[f64]]) -> Result<Vec<u8>> {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| self.pipeline.transform(r)).collect::<Result<_>>()?;
        Ok(match &self.learner {
            Learner::Mlp(m) => m.proba_batch(&x).into_iter().map(decide).collect(),
            other => x.iter().map(|r| decide(other.proba(r))).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema_version != Self::SCHEMA_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model schema version {}",
                m.schema_version
            )));
        }
        Ok(m)
    }
}

impl BinaryClassifier for Model {
    fn predict(&self, input: &[f64]) -> Result<bool> {
        Ok(Model::predict(self, input)? == 1)
    }

    fn input_width(&self) -> usize {
        self.pipeline.input.width()
    }
}
