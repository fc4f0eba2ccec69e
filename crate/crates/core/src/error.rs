//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too small: {height}x{width} (need height >= 4, width >= 8, width even)")]
    GridTooSmall { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("channel {channel} is degenerate (std = {std:e})")]
    DegenerateChannel { channel: usize, std: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("cohort is unidentifiable: {0}")]
    Unidentifiable(String),

    #[error("optimization diverged: {0}")]
    Divergence(String),

    #[error("zero-variance input to correlation")]
    ZeroVariance,

    #[error("too few samples: {got} nonzero deltas, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("subject id mismatch at index {index}: {left:?} vs {right:?}")]
    IdMismatch {
        index: usize,
        left: String,
        right: String,
    },

    #[error("bad container magic")]
    CorruptMagic,

    #[error("container truncated while reading {0}")]
    Truncated(&'static str),

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("tensor {0:?} not found in container")]
    MissingTensor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
