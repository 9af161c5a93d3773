use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cache capacity exhausted for sequence {sequence}: {shortfall} more block(s) needed")]
    Capacity { sequence: u64, shortfall: usize },

    #[error("cache integrity violation: {0}")]
    Integrity(String),

    #[error("corrupt fp8 payload: NaN codepoint {code:#04x} at element {index}")]
    DataIntegrity { code: u8, index: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("arithmetic overflow: {0}")]
    Overflow(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
