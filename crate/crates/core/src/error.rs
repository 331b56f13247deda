use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HotError>;

#[derive(Debug, Error)]
pub enum HotError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bit width mismatch: {0} vs {1}")]
    BitWidth(u8, u8),

    #[error("inner dimension {0} exceeds the accumulator overflow guard ({1})")]
    Overflow(usize, usize),

    #[error("granularity: {0}")]
    Granularity(String),

    #[error("non-finite value in {stage} at layer {layer}")]
    NonFinite { stage: String, layer: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format: {0}")]
    Format(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl HotError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HotError::InvalidArgument(msg.into())
    }
}
