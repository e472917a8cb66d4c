use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated a precondition: bad shape, bad index, bad config.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value fell outside its mathematical domain (NaN, negative count, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: 2 usage/parse, 3 IO,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Parse(_) => 2,
            Error::Io { .. } => 3,
            Error::Domain(_) | Error::Diverged { .. } => 4,
        }
    }

    /// Prefix the message with the context it occurred in, keeping the class.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Usage(m) => Error::Usage(format!("{ctx}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Parse(m) => Error::Parse(format!("{ctx}: {m}")),
            other => other,
        }
    }
}
