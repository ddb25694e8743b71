//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("input too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-energy window normalization at sample {0}")]
    WindowNormalization(usize),

    #[error("insufficient data for codebook init: need {needed} frames, got {got}")]
    InsufficientInitData { needed: usize, got: usize },

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error(transparent)]
    Bitstream(#[from] BitstreamError),

    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    CheckpointVersion { expected: u8, got: u8 },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Token-stream file errors. Each failure mode is a distinct kind so callers
/// (and tests) can tell a bad magic from a truncated payload from a corrupt index.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitstreamError {
    #[error("bad magic: expected \"WVTK\", got {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated stream: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("token index {index} out of range for codebook size {codebook_size}")]
    IndexOutOfRange { index: u32, codebook_size: u32 },

    #[error("codebook size {0} exceeds the u16 index format limit of 65536")]
    CodebookTooLarge(u32),

    #[error("stream/model mismatch: {0}")]
    HeaderMismatch(String),
}
