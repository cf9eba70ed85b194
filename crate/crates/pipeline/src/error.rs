use std::path::{Path, PathBuf};

use thiserror::Error;

/// Pipeline failures, grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad flags, unknown or malformed configuration keys.
    #[error("usage: {0}")]
    Usage(String),

    /// Unreadable, malformed or inconsistent input files.
    #[error("data: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents, located by byte offset.
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },

    /// Non-finite losses, gradients or outputs, and failed gradient checks.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] svhdr_core::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn parse(path: &Path, offset: usize, message: impl Into<String>) -> Self {
        Self::Parse { path: path.to_path_buf(), offset, message: message.into() }
    }

    /// 1 usage/config, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) | Self::Io { .. } | Self::Parse { .. } => 2,
            Self::Numerical(_) | Self::Core(svhdr_core::Error::NonFinite(_)) => 3,
            Self::Core(svhdr_core::Error::Contract(_)) => 2,
        }
    }
}
