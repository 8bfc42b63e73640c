use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("index error in {op}: {msg}")]
    Index { op: &'static str, msg: String },
    #[error("validation error in {op}: {msg}")]
    Validation { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Shape { op, msg: msg.into() }
    }

    pub(crate) fn index(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Index { op, msg: msg.into() }
    }

    pub(crate) fn validation(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Validation { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
