use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::TensorError::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
