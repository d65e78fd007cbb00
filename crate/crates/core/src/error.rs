use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid upsampling ratio {0}: must be >= 1")]
    InvalidRatio(f64),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate feature on branch {branch}: sigma = {sigma}")]
    DegenerateFeature { branch: usize, sigma: f64 },

    #[error("unsupported op on tape: {0}")]
    UnsupportedOp(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
