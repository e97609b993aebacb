use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("cross-entropy label {label} at row {row} is outside 0..{classes}")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm `{0}` has no running statistics; run a training pass before evaluation")]
    UninitializedRunningStats(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, actual: impl ToString) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
