use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KpuError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KpuError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] kpu_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("ablation rows failed: {0}")]
    Ablation(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file truncated: needs {needed} bytes, has {len}")]
    Truncated { needed: u64, len: u64 },
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}`: {reason}")]
    BadTensor { name: String, reason: String },
    #[error("header: {0}")]
    Header(String),
}

impl KpuError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| KpuError::Io { path, source }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            KpuError::Config(_) | KpuError::Core(kpu_core::Error::InvalidConfig(_)) => 2,
            KpuError::Core(kpu_core::Error::NonFiniteLoss(_) | kpu_core::Error::NonFinite { .. }) => 3,
            KpuError::GradCheck(_) => 1,
            KpuError::Ablation(_) => 4,
            _ => 5,
        }
    }
}
