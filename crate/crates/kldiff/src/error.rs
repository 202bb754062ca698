use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Ways a checkpoint file can fail to load.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: file not found")]
    MissingFile { path: PathBuf },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("{path} line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] kldiff_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an IO failure, reporting a missing file as its own category.
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            Error::MissingFile { path }
        } else {
            Error::Io { path, source }
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingFile { .. } => "missing_file",
            Error::Config { .. } => "config",
            Error::Checkpoint { source, .. } => match source {
                CheckpointError::BadMagic => "checkpoint_magic",
                CheckpointError::UnsupportedVersion { .. } => "checkpoint_version",
                CheckpointError::Truncated(_) => "checkpoint_truncated",
                CheckpointError::Malformed(_) => "checkpoint_malformed",
            },
            Error::Format { .. } => "format",
            Error::Core(e) => match e {
                kldiff_core::Error::Config(_) => "config",
                kldiff_core::Error::Shape(_) => "shape",
                kldiff_core::Error::InvalidInput(_) => "invalid_input",
                kldiff_core::Error::NonFinite(_) => "non_finite",
                kldiff_core::Error::Diverged { .. } => "diverged",
            },
        }
    }

    /// Process exit status; every category has its own.
    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "io" => 3,
            "missing_file" => 4,
            "config" => 5,
            "checkpoint_magic" => 6,
            "checkpoint_version" => 7,
            "checkpoint_truncated" => 8,
            "checkpoint_malformed" => 9,
            "format" => 10,
            "shape" => 11,
            "invalid_input" => 12,
            "non_finite" => 13,
            "diverged" => 14,
            _ => 1,
        }
    }

    /// One line: `error kind=<kind> code=<n> msg=<quoted message>`.
    pub fn report_line(&self) -> String {
        format!("error kind={} code={} msg={:?}", self.kind(), self.exit_code(), self.to_string())
    }
}
