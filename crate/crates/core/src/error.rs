use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyperparameter, key, or layer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A configuration key failed validation; carries the key name.
    #[error("invalid value for `{key}`: {reason}")]
    InvalidKey { key: String, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("tape corruption: {0}")]
    TapeCorruption(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value detected: {0}")]
    NonFinite(String),

    #[error("loss is NaN at epoch {epoch}, batch {batch}")]
    LossNaN { epoch: usize, batch: usize },

    #[error("self-check failed: {0}")]
    CheckFailed(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn key(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidKey {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration/validation problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidKey { .. }
            | Error::BadCheckpoint(_)
            | Error::Unsupported(_) => 2,
            _ => 1,
        }
    }
}
