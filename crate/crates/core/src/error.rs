use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample {index} = {value} lies outside [-1, 1]")]
    OutOfDomain { index: usize, value: f64 },

    #[error("window [{offset}, {end}) exceeds a source of {len} samples")]
    WindowOutOfBounds { offset: usize, end: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is outside a vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        vocab_size: usize,
    },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("signal of {len} samples is shorter than one hop of {hop}")]
    SignalTooShort { len: usize, hop: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("brute-force enumeration refused for {len} frames (limit {limit})")]
    TooLarge { len: usize, limit: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
