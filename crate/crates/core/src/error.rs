use thiserror::Error;

pub type Result<T, E = FatError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FatError {
    #[error("{op}: shape mismatch, {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model descriptor mismatch: {0}")]
    Descriptor(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FatError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        FatError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FatError::InvalidArgument(msg.into())
    }
}
