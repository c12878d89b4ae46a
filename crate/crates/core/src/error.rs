use thiserror::Error;

pub type Result<T> = std::result::Result<T, LdmError>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LdmError {
    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value at channel {channel}, index {index}")]
    NonFinite { channel: usize, index: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid parameter '{name}': {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("insufficient data: need at least {required} samples, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl LdmError {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        LdmError::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        LdmError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
