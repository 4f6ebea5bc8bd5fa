use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected} elements, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("timestep {t} outside [{lo}, {hi}]")]
    TimestepOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("composition is not non-decreasing at frame {frame}: {prev} > {next}")]
    NotNonDecreasing { frame: usize, prev: usize, next: usize },

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite latent at step {step}, frame {frame}")]
    NonFiniteLatent { step: usize, frame: usize },

    #[error("enumeration of {requested} items exceeds cap {cap}")]
    EnumerationCap { requested: u128, cap: u128 },

    #[error("chi-square cell {cell} has expected count {expected:.3} < 5")]
    UnderpopulatedCell { cell: usize, expected: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("internal consistency failure: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
