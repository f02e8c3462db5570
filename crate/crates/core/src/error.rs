use thiserror::Error;

use crate::device::Gate;

/// Errors produced across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("safety violation: {gate} = {voltage} V outside [{min}, {max}]")]
    SafetyViolation {
        gate: Gate,
        voltage: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid normalization constant a_max = {0}")]
    InvalidNormalization(f64),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no crossing of level {level} inside the swept range")]
    NoCrossing { level: f64 },
    #[error("model not trained or incompatible: {0}")]
    Model(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("serialization error: {0}")]
    Serialization(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
