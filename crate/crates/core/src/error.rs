use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met (shape mismatch, bad parameter, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index fell outside the grid or tensor it addresses.
    #[error("index out of range: {0}")]
    Range(String),

    /// A binary or text file did not match its declared layout.
    #[error("format error in `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    /// A NaN or infinity showed up where a finite number was required.
    #[error("non-finite value in `{name}`: {detail}")]
    NonFinite { name: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
