use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training lab.
#[derive(Debug, Error)]
pub enum FerError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: epoch {epoch} exceeds total epochs {total}")]
    Schedule { epoch: usize, total: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FerError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        FerError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FerError>;
