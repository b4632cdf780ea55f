use std::io;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("audio error: {0}")]
    Audio(String),
    #[error("empty evaluation set: {0}")]
    EmptyEvaluation(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
