//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure cases surfaced by the library.
///
/// `Contract` marks misuse of an API (stale caches, disabled components being
/// driven); the other variants describe bad data or bad arguments.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("sample id {0} not found")]
    NotFound(u64),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid format: {0}")]
    Format(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
