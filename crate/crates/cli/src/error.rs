use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] driftbench_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration, 3 for runtime or numeric
    /// failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use driftbench_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Core(E::Config(_) | E::Value(_)) => 2,
            Self::Core(E::Io(_)) | Self::Io { .. } => 4,
            Self::Core(_) | Self::Artifact { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
