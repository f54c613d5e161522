use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Inconsistent dimensions, invalid hyperparameters, unknown config keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller handed in a value outside an operation's domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A snapshot tag was requested that the store does not hold.
    #[error("snapshot `{0}` not found")]
    SnapshotNotFound(String),

    /// A training loop produced a non-finite objective.
    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A file could not be parsed.
    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 2 for divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
