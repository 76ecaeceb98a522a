use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("worker {worker} diverged at local step {step} (loss {loss})")]
    WorkerDiverged { worker: usize, step: usize, loss: f64 },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("expected {expected} worker deltas, got {got}")]
    WorkerCount { expected: usize, got: usize },

    #[error("feature width {got} does not match optimizer input width {expected}")]
    FeatureWidth { expected: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("all {0} particles diverged")]
    AllDiverged(usize),

    #[error("sweep: every grid point diverged ({0})")]
    SweepDiverged(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("invalid config field `{field}`: {msg}")]
    ConfigField { field: String, msg: String },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::ConfigField {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
