use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("memory bank capacity {capacity} exceeded by batch of {batch} rows")]
    Capacity { capacity: usize, batch: usize },

    #[error("parameter congruence error: {0}")]
    Congruence(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at step {step}: {components}")]
    Training { step: u64, components: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::MissingFile(_) => 3,
            Error::Numeric(_) | Error::Training { .. } => 4,
            Error::Format(_) | Error::Dataset(_) | Error::Shape(_) => 5,
            Error::Protocol(_) => 6,
            Error::Capacity { .. } | Error::Congruence(_) | Error::Precondition(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
