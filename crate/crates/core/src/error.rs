use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the enhancement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("unsupported raster for {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },

    #[error("image has a zero dimension")]
    ZeroDimension,

    #[error("dimension mismatch: {expected_w}x{expected_h} vs {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("mask {path} contains value {value}; mask files must hold exactly {{0, 255}}")]
    MaskNotBinary { path: PathBuf, value: u8 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: loss not finite at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
