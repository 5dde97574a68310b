//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, unknown, or out of its allowed range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input tensor or argument does not satisfy an operation's preconditions.
    #[error("input error: {0}")]
    Input(String),

    /// A pipeline stage was invoked before its prerequisites exist.
    #[error("state error: {0}")]
    State(String),

    /// A persisted artifact is missing, truncated, or inconsistent.
    #[error("load error: {0}")]
    Load(String),

    /// A non-finite value surfaced during optimization.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
    pub fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
