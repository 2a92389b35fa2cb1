//! Crate-wide error type with stable machine-readable codes.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence too long: {0}")]
    Length(String),

    #[error("corpus error at line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("incompatible artifacts: {0}")]
    Compat(String),

    #[error("training aborted: {0}")]
    Train(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short code for machine-parsable CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Index(_) => "E_INDEX",
            Error::Contract(_) => "E_CONTRACT",
            Error::Config(_) => "E_CONFIG",
            Error::Length(_) => "E_LENGTH",
            Error::Corpus { .. } => "E_CORPUS",
            Error::Vocab(_) => "E_VOCAB",
            Error::Format(_) => "E_FORMAT",
            Error::Compat(_) => "E_COMPAT",
            Error::Train(_) => "E_TRAIN",
            Error::Decode(_) => "E_DECODE",
            Error::Metric(_) => "E_METRIC",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }
}
