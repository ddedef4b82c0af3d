use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlamError {
    /// A caller broke an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tracker lost: {0}")]
    TrackerLost(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("synthetic generation error: {0}")]
    Generation(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SlamError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SlamError::Contract(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        SlamError::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = SlamError> = std::result::Result<T, E>;
