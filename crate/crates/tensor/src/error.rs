use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: NaN in input")]
    NanInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
