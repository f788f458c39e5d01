use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("tensor data length {got} does not match shape product {expected}")]
    DataLength { expected: usize, got: usize },

    #[error("tensor shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),

    #[error("non-finite value at flat index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("{what} out of range: {value} not in [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("degenerate face box: {0}")]
    DegenerateBox(String),

    #[error("face box [{x}, {y}, {w}, {h}] exceeds image bounds {img_h}x{img_w}")]
    BoxOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        img_h: usize,
        img_w: usize,
    },

    #[error("frames too small for flow estimation: {h}x{w}, minimum {min}x{min}")]
    FramesTooSmall { h: usize, w: usize, min: usize },

    #[error("clip needs at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },

    #[error("non-finite loss at step {step}: l_r={l_r}, l_id={l_id}")]
    NonFiniteLoss { step: u64, l_r: f64, l_id: f64 },

    #[error("container error: {0}")]
    Container(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("resampling found no occupied intensity bins")]
    AllBinsEmpty,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
