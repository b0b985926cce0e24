use thiserror::Error;

use crate::model::procedure::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample count mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("{what} supports n <= {limit}, got n = {n}{}", hint.map(|h| format!(" ({h})")).unwrap_or_default())]
    UnsupportedSize {
        what: &'static str,
        n: usize,
        limit: usize,
        hint: Option<&'static str>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prior {index} is {value}, expected a value in [0, 1]")]
    PriorOutOfRange { index: usize, value: String },

    #[error("malformed procedure text at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },

    #[error("invalid procedure: {0}")]
    InvalidProcedure(ValidationReport),

    #[error("resource limit exceeded: {0}")]
    ResourceExhausted(String),

    #[error("no zone map available for n = {0}")]
    MissingZoneMap(usize),

    #[error("session already complete")]
    SessionComplete,

    #[error("zone map file is corrupt: {0}")]
    CorruptZoneMap(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn unsupported(what: &'static str, n: usize, limit: usize) -> Self {
        Error::UnsupportedSize {
            what,
            n,
            limit,
            hint: None,
        }
    }
}
