use thiserror::Error;

/// Errors raised by the numeric kernels, trainers and file readers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("matrix {0} is singular after jitter")]
    Singular(&'static str),

    #[error("singular value decomposition did not converge")]
    SvdNoConvergence,

    #[error("symmetric eigendecomposition did not converge")]
    EigenNoConvergence,

    #[error("quadrature grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("requested {requested} singular functions but only {available} are above the floor")]
    RankExceeded { requested: usize, available: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
