use thiserror::Error;

/// Errors surfaced by tensor primitives, model construction and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid dimension for {op}: axis {axis} on shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward already run on this tape")]
    BackwardTwice,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error("missing gradient for parameter: {0}")]
    MissingGrad(String),

    #[error("batch normalization needs a batch of at least 2 in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training aborted: non-finite loss at step {0}")]
    NanLoss(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
