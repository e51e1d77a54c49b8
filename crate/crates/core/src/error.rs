use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed audio file: {0}")]
    Format(String),

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("incompatible parameters: {0}")]
    Incompatible(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Divergence {
        iteration: usize,
        reason: String,
        /// Parameters after the last iteration whose loss was finite.
        last_finite: Box<crate::ufp::Ufp>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl Error {
    /// Short stable tag used to prefix diagnostics.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::UnsupportedEncoding(_) => "encoding",
            Error::InvalidArgument(_) => "argument",
            Error::TooShort(_) => "too-short",
            Error::ShapeMismatch(_) => "shape",
            Error::Incompatible(_) => "incompatible",
            Error::Undefined(_) => "undefined",
            Error::NonFiniteGradient(_) => "non-finite",
            Error::Divergence { .. } => "divergence",
            Error::Parse { .. } => "parse",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
