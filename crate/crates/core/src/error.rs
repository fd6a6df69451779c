use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatches, illegal widths, malformed config documents.
    #[error("configuration error: {0}")]
    Config(String),

    /// NaN or infinity escaped an operation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was called out of order or with arguments outside its domain.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("search error: {0}")]
    Search(String),

    #[error("load error: {0}")]
    Load(String),

    /// Training code asked for target labels.
    #[error("target labels are only available on evaluation paths")]
    LabelLeak,

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            Error::Io(err.into())
        } else {
            Error::Config(err.to_string())
        }
    }
}
