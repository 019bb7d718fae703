use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("lambda bisection did not converge for row {row} (residual {residual:e})")]
    Bisection { row: usize, residual: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error("missing prerequisite artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
