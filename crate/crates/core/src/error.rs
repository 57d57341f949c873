use thiserror::Error;
use tslm_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("injection error: {0}")]
    Injection(String),
    #[error("generation error (query {query}): {message}")]
    Generation { query: usize, message: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    /// True for failures that stem from numerics (NaN loss, non-finite gradients).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Tensor(TensorError::Numeric(_)))
    }
}
