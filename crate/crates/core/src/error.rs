use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: shapes, ranges, configuration fields.
    #[error("invalid input: {0}")]
    Validation(String),

    /// A numerical routine produced something it should not have
    /// (non-finite update, indefinite matrix, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// File contents that do not parse or carry an unknown version tag.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Format(_) => 2,
            Error::Numerical(_) => 3,
            Error::Io { .. } => 1,
        }
    }

    /// Prefix the message with where in a longer computation the failure happened.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
            Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
            Error::Format(m) => Error::Format(format!("{what}: {m}")),
            io => io,
        }
    }
}
