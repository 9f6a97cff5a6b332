use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A file did not conform to one of the binary/text formats.
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Bug guard: a state that should be unreachable.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}
