use std::path::PathBuf;

use codtox_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Config(String),

    /// The generation or training endpoint could not be reached or answered
    /// with an error; retried by the evaluator.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, LlmError>;

impl LlmError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        LlmError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
