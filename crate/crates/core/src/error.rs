use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch norm needs at least 2 values per channel in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("CTC target of length {target_len} (with {repeats} adjacent repeats) cannot be aligned to {frames} frames")]
    InfeasibleTarget {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no recorded forward pass: {0}")]
    NoForward(String),

    #[error("wav error in {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("unsupported sample rate {found} Hz in {path} (expected {expected} Hz)")]
    SampleRate {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path} has {channels} channels; only mono audio is supported")]
    Channels { path: PathBuf, channels: u16 },

    #[error("inventory error at line {line}: {reason}")]
    Inventory { line: usize, reason: String },

    #[error("unknown phoneme symbol {0:?}")]
    UnknownSymbol(String),

    #[error("manifest error at line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing component: {0}")]
    Missing(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
