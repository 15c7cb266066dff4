use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations, the model and the data utilities.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("empty reduction set")]
    EmptyReduction,
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("channel/group mismatch: {0}")]
    GroupMismatch(String),
    #[error("extent {extent} not divisible by {divisor} ({what})")]
    Indivisible {
        what: &'static str,
        extent: usize,
        divisor: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("slice index {index} out of range for extent {extent}")]
    SliceOutOfRange { index: usize, extent: usize },
    #[error("size too small: volume edge {0}, minimum 16")]
    SizeTooSmall(usize),
    #[error("volume is not cubic: {0:?}")]
    NonCubic(Vec<usize>),
    #[error("sample count {0} too small (minimum 10)")]
    TooFewSamples(usize),
    #[error("extent {extent} smaller than window {window}")]
    ExtentBelowWindow { extent: usize, window: usize },
    #[error("empty split")]
    EmptySplit,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
