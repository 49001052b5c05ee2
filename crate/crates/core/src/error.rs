use thiserror::Error;

#[derive(Debug, Error)]
pub enum FplError {
    #[error("invalid dimension {0}: expected 2 or 3")]
    InvalidDimension(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] fpl_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FplError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FplError::InvalidParameter(msg.into()))
}
