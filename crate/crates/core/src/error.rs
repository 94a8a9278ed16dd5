use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed binary file; `offset` is the byte position where decoding failed.
    #[error("{msg} at offset {offset}")]
    Format { offset: u64, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Every chain violation found while assembling a pipeline, `; `-separated.
    #[error("invalid pipeline: {0}")]
    Pipeline(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("zero covariance: all fitting rows are identical")]
    ZeroCovariance,

    #[error("zero-norm row {id:?}")]
    ZeroNorm { id: String },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("pipeline spec: {0}")]
    Json(#[from] serde_json::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
