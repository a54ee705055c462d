use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("token {token} outside vocabulary of size {vocab_size}")]
    Vocabulary { token: u32, vocab_size: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("masked loss needs at least one active position")]
    EmptyMask,

    #[error("reward evaluation failed: {0}")]
    Reward(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
