use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {stage} (block {block:?})")]
    Numerical { stage: String, block: Option<usize> },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("cannot fit class-conditional gaussians: class {class} has no samples")]
    Fit { class: usize },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing checkpoint for method `{method}`: {path}")]
    MissingCheckpoint { method: String, path: PathBuf },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
