use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("training diverged at iteration {iteration} ({stage}): {reason}")]
    Training {
        stage: String,
        iteration: usize,
        reason: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("stale artifact: {0}")]
    Staleness(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
