use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain an operation is defined on.
    #[error("{0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model/config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(nnkit::NnError),
}

impl From<nnkit::NnError> for Error {
    fn from(e: nnkit::NnError) -> Self {
        match e {
            nnkit::NnError::NonFinite(what) => Error::NonFinite(what),
            other => Error::Nn(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

