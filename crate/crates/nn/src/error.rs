use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("no forward trace recorded for this backward pass")]
    MissingTrace,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
