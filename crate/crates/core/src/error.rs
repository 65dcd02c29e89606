//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NasError {
    #[error("shape mismatch: {left} vs {right}")]
    Shape { left: String, right: String },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("degenerate parameters: {0}")]
    Degenerate(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("search space has {size} candidates, cap is {cap}")]
    Capacity { size: u128, cap: usize },

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NasError>;

impl NasError {
    pub(crate) fn shape(left: impl std::fmt::Display, right: impl std::fmt::Display) -> Self {
        NasError::Shape {
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn value(msg: impl Into<String>) -> Self {
        NasError::Value(msg.into())
    }
}
