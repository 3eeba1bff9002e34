use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("variable was not recorded on this tape")]
    NoTape,

    #[error("backward already ran on this tape; reset it before reuse")]
    AlreadyBackpropagated,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
