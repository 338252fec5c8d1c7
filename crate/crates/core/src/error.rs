use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor id {0} is not on this tape")]
    NotOnTape(usize),

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("malformed annotation header: {0}")]
    MalformedHeader(String),

    #[error("annotation point count mismatch: header says {expected}, found {found}")]
    PointCountMismatch { expected: usize, found: usize },

    #[error("point {index} at ({x}, {y}) is outside a {w}x{h} scene")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        w: usize,
        h: usize,
    },

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("bad config value for `{key}`: {value}")]
    BadConfigValue { key: String, value: String },

    #[error("non-finite loss at step {step} (l1 = {l1}, l2 = {l2})")]
    NonFiniteLoss { step: usize, l1: f64, l2: f64 },

    #[error("gradient check failed: max relative error {max_rel_err}")]
    GradCheckFailed { max_rel_err: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
