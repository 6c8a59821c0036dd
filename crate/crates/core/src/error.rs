use std::path::PathBuf;

use thiserror::Error;
use viable_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] AutodiffError),

    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("row count mismatch: {0}")]
    Rows(String),

    #[error("empty episode: at least one sample is required")]
    EmptyEpisode,

    #[error("config: {key}: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint: unsupported version {0}")]
    VersionMismatch(u32),

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: {0}")]
    Corrupt(String),

    #[error("results line {line}: {message}")]
    Csv { line: u64, message: String },

    #[error("nothing to write: no result rows")]
    NoRows,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit status: 1 invariant failure, 2 configuration error,
    /// 3 I/O or file-format error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Spec(_) => 2,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::VersionMismatch(_)
            | Error::Truncated(_)
            | Error::Corrupt(_)
            | Error::Csv { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
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
