use crate::checkpoint::CompatReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed header or unparsable input document.
    #[error("format error: {0}")]
    Format(String),

    /// Data offsets that overlap, run past the data region, or disagree with
    /// the declared shape.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported dtype {0:?}")]
    Dtype(String),

    #[error("non-finite value in tensor {0:?}")]
    NonFinite(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),

    #[error("incompatible checkpoints: {0}")]
    Incompatible(Box<CompatReport>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Invalid model configuration, token ids or sequence lengths.
    #[error("model error: {0}")]
    Model(String),

    #[error("mode mismatch: operation needs {expected} mode, model is {actual}")]
    ModeMismatch {
        expected: crate::model::Mode,
        actual: crate::model::Mode,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }
}
