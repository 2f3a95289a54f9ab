use codtox_classic::ClassicError;
use codtox_core::CoreError;
use codtox_encoder::EncoderError;
use codtox_llm::LlmError;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Error)]
pub enum AppError {
    /// Bad flags, bad or inconsistent configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// Unreadable or invalid input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },
}

pub type Result<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) => EXIT_DATA,
            AppError::Stage { .. } => EXIT_STAGE,
        }
    }

    pub fn stage(stage: &str, message: impl std::fmt::Display) -> Self {
        AppError::Stage { stage: stage.to_string(), message: message.to_string() }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        AppError::Data(format!("{}: {e}", path.display()))
    }

    /// Re-tags an error raised while running `stage`; usage and data errors
    /// keep their kind.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            AppError::Stage { message, .. } => AppError::stage(stage, message),
            other => other,
        }
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => AppError::Usage(m),
            e if e.is_data_error() => AppError::Data(e.to_string()),
            e => AppError::stage("core", e),
        }
    }
}

impl From<ClassicError> for AppError {
    fn from(e: ClassicError) -> Self {
        match e {
            ClassicError::Config(m) => AppError::Usage(m),
            e if e.is_data_error() => AppError::Data(e.to_string()),
            e => AppError::stage("classic", e),
        }
    }
}

impl From<EncoderError> for AppError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(m) => AppError::Usage(m),
            EncoderError::Core(c) => c.into(),
            e => AppError::stage("encoder", e),
        }
    }
}

impl From<LlmError> for AppError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(m) => AppError::Usage(m),
            LlmError::Core(c) => c.into(),
            e => AppError::stage("llm", e),
        }
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Data(e.to_string())
    }
}
