use modtune_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.as_ref().display().to_string(), source }
    }

    /// True for failures caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, CoreError::NonFinite { .. } | CoreError::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
