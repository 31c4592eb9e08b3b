use thiserror::Error;

/// Error type shared across the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement (matmul dims, channel counts, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (non-square token budget, zero steps, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or missing data (dataset files, checkpoints, annotations).
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure during optimization (NaN/Inf loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
