use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown category `{0}`")]
    UnknownCategory(String),

    #[error("repository `{0}` would be empty")]
    EmptyRepository(&'static str),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("malformed tensor file {path}: {message}")]
    TensorFormat { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from a bad configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidArgument(_) | Error::UnknownCategory(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
