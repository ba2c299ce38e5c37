use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record or artifact line violated its schema.
    #[error("{}:{line}: {message}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid host `{host}`: {reason}")]
    Host { host: String, reason: &'static str },

    #[error("cannot parse url `{url}`: {reason}")]
    Url { url: String, reason: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    /// An operation was called on input that breaks its precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {reason}")]
    Artifact { what: &'static str, reason: String },

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn url(url: &str, reason: impl ToString) -> Self {
        Error::Url {
            url: url.to_string(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn artifact(what: &'static str, reason: impl ToString) -> Self {
        Error::Artifact {
            what,
            reason: reason.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
