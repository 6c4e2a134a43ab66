use thiserror::Error;

/// Errors raised by the imaging, geometry and optimization routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input too small for the requested operation (e.g. a 1-pixel grid for a 2x2 box filter).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid depth {0}: depth must be strictly positive")]
    InvalidDepth(f64),

    /// Malformed or truncated image file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A parameter block received a non-finite gradient.
    #[error("non-finite gradient in parameter block `{block}` at index {index}")]
    NonFiniteGradient { block: String, index: usize },

    #[error("scene error: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
