use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidLossConfig(String),
    #[error("non-finite gradient in parameter tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("model file version mismatch: found {found}, expected fcn_v1")]
    VersionMismatch { found: String },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> NnError {
    NnError::ShapeMismatch {
        context,
        expected: expected.into(),
        actual: actual.into(),
    }
}
