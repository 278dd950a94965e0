use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] flatmin_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        HarnessError::Core(flatmin_core::Error::Parse(msg.into()))
    }

    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Core(flatmin_core::Error::Config(msg.into()))
    }

    /// Process exit code: 1 usage, 2 malformed input, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Core(e) if e.is_numeric() => 3,
            HarnessError::Core(_) | HarnessError::Io { .. } => 2,
        }
    }
}
