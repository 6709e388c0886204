use std::path::PathBuf;

use pseudoheal_autograd::ShapeError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters; `field` is a dotted path when known.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Input data that violates a documented contract.
    #[error("invalid data: {0}")]
    Validation(String),

    /// A dataset or checkpoint on disk is damaged or inconsistent.
    #[error("corrupt {what} at {path}: {detail}")]
    Corrupt {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error(transparent)]
    Shape(#[from] ShapeError),

    /// A critic cannot supply a differentiable input gradient.
    #[error("critic `{0}` does not provide a differentiable input gradient")]
    NotDifferentiable(String),

    /// A metric whose denominator vanished.
    #[error("metric `{metric}` is undefined: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    /// A loss became NaN or infinite during training.
    #[error("non-finite `{term}` at step {step} (diagnostic checkpoint: {checkpoint:?})")]
    NonFinite {
        term: String,
        step: u64,
        checkpoint: Option<PathBuf>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(what: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Corrupt {
            what,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
