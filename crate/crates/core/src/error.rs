use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("batch statistics need more than one element per channel (got n*h*w = {0})")]
    DegenerateStatistics(usize),

    #[error("every pixel carries the ignore label; loss is undefined")]
    DegenerateLoss,

    #[error("confusion matrix is empty; scores are undefined")]
    DegenerateMetrics,

    #[error("no gradient reached parameter `{0}`")]
    MissingGradient(String),

    #[error("function is not deterministic: two evaluations gave {first:e} and {second:e}")]
    Determinism { first: f64, second: f64 },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: u8, classes: usize },

    #[error("non-finite loss at step {step}; largest |grad| in `{param}`")]
    NonFiniteLoss { step: usize, param: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Label { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
