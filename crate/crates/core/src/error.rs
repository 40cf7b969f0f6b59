use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("factor {dim} is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { dim: usize, pivot: usize, value: f64 },

    #[error("refusing to materialize {entries} entries (cap {cap})")]
    ResourceLimit { entries: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}", data_message(path, *line, message))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn data_message(path: &Option<PathBuf>, line: Option<usize>, message: &str) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{}: {}", p.display(), l, message),
        (Some(p), None) => format!("{}: {}", p.display(), message),
        (None, Some(l)) => format!("line {}: {}", l, message),
        (None, None) => message.to_string(),
    }
}

impl Error {
    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file path to a data error that was raised without one.
    pub(crate) fn at_path(self, at: &std::path::Path) -> Self {
        match self {
            Error::Data {
                path: None,
                line,
                message,
            } => Error::Data {
                path: Some(at.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}

/// Failures specific to reading checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated")]
    Truncated,

    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
