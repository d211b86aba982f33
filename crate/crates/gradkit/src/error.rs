use thiserror::Error;

pub type Result<T, E = GradError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("backward called before any forward evaluation was recorded")]
    EmptyTape,

    #[error("node {0} does not belong to this tape")]
    UnknownNode(usize),

    #[error("`{op}` requires a scalar output, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
