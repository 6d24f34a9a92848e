use thiserror::Error;

/// Errors surfaced by tensor ops, kernels, model assembly and IO.
#[derive(Debug, Error)]
pub enum HthError {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: &'static str,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter not on tape (tape id {expected}, var tape id {got})")]
    NotOnTape { expected: u64, got: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HthError>;

impl HthError {
    pub fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        HthError::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
            context,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        HthError::InvalidArgument(msg.into())
    }
}
