use std::path::PathBuf;

use codtox_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClassicError {
    #[error("training error: {0}")]
    Training(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fold error: {0}")]
    Fold(String),

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

pub type Result<T> = std::result::Result<T, ClassicError>;

impl ClassicError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ClassicError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Bad input data rather than a failed computation.
    pub fn is_data_error(&self) -> bool {
        match self {
            ClassicError::Validation(_) | ClassicError::Fold(_) => true,
            ClassicError::Core(e) => e.is_data_error(),
            _ => false,
        }
    }
}
