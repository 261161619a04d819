use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("graph construction: {0}")]
    Graph(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unknown node key `{0}`")]
    UnknownNode(String),

    #[error("stale or mismatched cache: {0}")]
    StaleCache(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("embedding provider: {0}")]
    Provider(String),

    #[error("checkpoint does not match source graphs: {0}")]
    FingerprintMismatch(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code used by the CLI error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Graph(_) => "GRAPH",
            Error::Shape(_) => "SHAPE",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Parse(_) => "PARSE",
            Error::Format { .. } => "FORMAT",
            Error::UnknownNode(_) => "UNKNOWN_NODE",
            Error::StaleCache(_) => "STALE_CACHE",
            Error::NonFinite(_) => "NON_FINITE",
            Error::Provider(_) => "PROVIDER",
            Error::FingerprintMismatch(_) => "FINGERPRINT_MISMATCH",
            Error::Empty(_) => "EMPTY_INPUT",
            Error::Io(_) => "IO",
            Error::Json(_) => "JSON",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
