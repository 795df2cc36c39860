//! Crate-wide error type, categorized so the CLI can map failures to
//! stable exit codes (2 config, 3 data, 4 internal).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration; the message lists every violation found.
    #[error("config error: {0}")]
    Config(String),

    /// Input file does not match the expected schema (missing columns,
    /// schema fingerprint mismatch, unsupported model version).
    #[error("schema error: {0}")]
    Schema(String),

    /// Malformed or unusable data encountered at runtime.
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// A point or id fell outside the configured region grid.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// Invariant violation inside the library itself.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Schema(_) | Error::Data(_) | Error::Io(_) | Error::OutOfBounds(_) => 3,
            Error::Internal(_) => 4,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(e.to_string())
    }
}
