use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("need at least {needed} frames, got {got}")]
    TooFewFrames { needed: usize, got: usize },

    #[error("kernel window {window} too small, need at least {needed}")]
    WindowTooSmall { window: usize, needed: usize },

    #[error("temporal offset {0} is not a free flow variable (only |n| = 1)")]
    NotUnitOffset(isize),

    #[error("conjugate gradient diverged after {iters} iterations (residual {residual:e}); step sizes too large?")]
    CgDiverged { iters: usize, residual: f64 },

    #[error("propagation must go from a coarser to a finer level ({from} -> {to})")]
    WrongPropagationDirection { from: f64, to: f64 },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("malformed {format} data: {reason}")]
    Decode {
        format: &'static str,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Codec(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dims(expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
