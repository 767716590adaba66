use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    /// A pipeline contract was violated upstream (e.g. an unclean value
    /// reached the scaler).
    #[error("internal error: {0}")]
    Internal(String),
    #[error("empty training scope: {0}")]
    EmptyScope(String),
    #[error(transparent)]
    Nn(#[from] glyconet_nn::NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Whether the failure is attributable to input data rather than the run.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Data { .. } | Error::Invalid(_) | Error::EmptyScope(_) | Error::Io { .. } | Error::Json(_))
    }
}
