use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SableError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SableError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error ({path}): {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("parameter `{name}` mismatch: {detail}")]
    ParamMismatch { name: String, detail: String },

    #[error("environment fault in slot {slot}: {detail}")]
    Environment { slot: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SableError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SableError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        SableError::Contract(detail.into())
    }
}
