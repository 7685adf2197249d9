use std::path::PathBuf;

/// Errors raised by the library.
///
/// `Contract` covers every violated precondition (shape mismatches, invalid
/// labels, misuse of the training protocol). I/O and format problems carry
/// the path that caused them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("no gradient path from the loss to the requested tensor")]
    NoGradientPath,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no evaluable classes: every class has an empty union")]
    NoEvaluableClasses,

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
