use std::path::PathBuf;

use codtox_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

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

pub type Result<T> = std::result::Result<T, EncoderError>;

impl EncoderError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        EncoderError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &std::path::Path, message: impl Into<String>) -> Self {
        EncoderError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}
