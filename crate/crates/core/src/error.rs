//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid scene config: {0}")]
    SceneConfig(String),

    #[error("dataset line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("missing frame file: {0}")]
    MissingFrame(PathBuf),

    #[error("attention map must be square, got {rows}x{cols}")]
    NonSquareAttention { rows: usize, cols: usize },

    #[error("masking ratio must be in [0, 1), got {0}")]
    BadMaskRatio(f64),

    #[error("token sequence length {got} does not match mask length {expected}")]
    MaskLengthMismatch { got: usize, expected: usize },

    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),

    #[error("need at least 2 samples to mine negatives")]
    NoNegatives,

    #[error("sentence has no maskable token")]
    NoMaskableToken,

    #[error("negative loss weight: {0}")]
    NegativeWeight(f64),

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("frame dims {h}x{w} not divisible by patch size {p}")]
    BadPatchSize { h: usize, w: usize, p: usize },

    #[error("degenerate box after clamping: {0}")]
    DegenerateBox(String),

    #[error("zero-area box")]
    ZeroAreaBox,

    #[error("zero-norm vector where a direction is required")]
    ZeroNorm,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("instance retrieval needs candidates from at least 2 sources")]
    SingleSourcePool,

    #[error("dataset has no instances")]
    NoInstances,

    #[error("empty prediction set")]
    EmptyPredictions,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage-1 checkpoint required for hand-off but not found: {0}")]
    MissingHandoff(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
