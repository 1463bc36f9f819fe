use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument: bad shape, index out of range, invalid axis.
    #[error("argument error: {0}")]
    Argument(String),
    /// The API was driven in an order it does not support.
    #[error("usage error: {0}")]
    Usage(String),
    /// Configuration does not match what is being loaded or run.
    #[error("config error: {0}")]
    Config(String),
    /// A config or manifest file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A persisted file is truncated or corrupt.
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag, used by the CLI for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
