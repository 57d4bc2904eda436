use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{0} simultaneous keys; at most 4 fit the action slots")]
    TooManyKeys(usize),
    #[error("frame is {width}x{height} with {len} bytes, expected {expected} bytes")]
    BadFrame { width: usize, height: usize, len: usize, expected: usize },
    #[error("trajectory lengths disagree: {frames} frames, {actions} actions, {mask} mask entries")]
    RaggedTrajectory { frames: usize, actions: usize, mask: usize },
    #[error("text span {start}..={end} is outside a {len}-frame trajectory")]
    BadSpan { start: usize, end: usize, len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Failures while reading a trajectory directory.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("{what}: expected {expected}, found {found}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("bad action record on line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error(transparent)]
    Invalid(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("dataset is empty or has no usable windows")]
    EmptyDataset,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine has no model loaded")]
    Uninitialized,
    #[error("frame is {got_w}x{got_h}, model expects {want}x{want}")]
    FrameSize { got_w: usize, got_h: usize, want: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
