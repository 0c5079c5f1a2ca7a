use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("range error: {0}")]
    Range(String),

    #[error("monotonicity error: {0}")]
    Monotonicity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
