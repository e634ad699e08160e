use thiserror::Error;

/// Errors produced by scene construction, model evaluation, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A domain invariant was violated (bad lengths, non-finite values, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor or feature dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation needed a ground-truth future that the scene does not carry.
    #[error("scene `{0}` has no ground-truth future")]
    MissingGroundTruth(String),

    /// A scene file could not be parsed; `line` is 1-based.
    #[error("scene file line {line}: {msg}")]
    SceneFile { line: usize, msg: String },

    /// A checkpoint could not be encoded or decoded.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
