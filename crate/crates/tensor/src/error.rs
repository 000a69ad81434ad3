use thiserror::Error;

use crate::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("loss must be a scalar, got shape {0}")]
    NotScalar(Shape),

    #[error("{op}: row {row} is not a probability distribution (sum {sum})")]
    NotDistribution {
        op: &'static str,
        row: usize,
        sum: f64,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
