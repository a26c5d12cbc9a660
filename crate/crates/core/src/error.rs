use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClaspError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("demonstration rejected (retriable): {0}")]
    DemoRejected(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("insufficient records: {0}")]
    InsufficientRecords(String),
}

pub type Result<T, E = ClaspError> = std::result::Result<T, E>;
