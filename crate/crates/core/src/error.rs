use thiserror::Error;

#[derive(Debug, Error)]
pub enum CpgaError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CpgaError>;

impl CpgaError {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        CpgaError::Config {
            field,
            reason: reason.into(),
        }
    }
}
