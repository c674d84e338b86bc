use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum CpampError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CpampError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CpampError::InvalidArgument(msg.into()))
}
