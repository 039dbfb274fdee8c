//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer was called with inconsistent shapes.
    #[error("shape mismatch on {context}: {detail}")]
    ShapeMismatch { context: &'static str, detail: String },

    /// Arguments violate an operation's precondition.
    #[error("invalid argument for {context}: {detail}")]
    InvalidArgument { context: &'static str, detail: String },

    /// A mask failed the closed-band (hollow) invariant.
    #[error("mask is not a closed hollow band: {0}")]
    BrokenBand(String),

    /// Configuration file or `--set` override problem.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset missing or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value surfaced during training.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed binary tensor file.
    #[error("tensor file format error: {0}")]
    Format(String),
}

impl Error {
    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { context, detail: detail.into() }
    }

    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { context, detail: detail.into() }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } => 2,
            Error::Data(_) | Error::Format(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}
