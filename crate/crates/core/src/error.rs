use std::path::PathBuf;

/// Errors raised anywhere in the counting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value violated a documented precondition.
    #[error("{0}")]
    Validation(String),

    /// A configuration value is inconsistent or out of range.
    #[error("{0}")]
    Config(String),

    /// An operation was invoked in the wrong pipeline state.
    #[error("{0}")]
    State(String),

    /// A metric was requested outside its domain of definition.
    #[error("{0}")]
    Domain(String),

    /// Training produced a NaN or infinite loss.
    #[error("{0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its content could not be decoded.
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    /// Short stable tag used as the machine-readable prefix of CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! validation {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}
pub(crate) use validation;
