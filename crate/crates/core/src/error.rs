use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(
        "video dims ({t}, {h}, {w}) are not divisible by tube ({dt}, {dh}, {dw}); pad or crop the video first"
    )]
    NotDivisible {
        t: usize,
        h: usize,
        w: usize,
        dt: usize,
        dh: usize,
        dw: usize,
    },
    #[error("box size must be positive, got {w}x{h}")]
    NonPositiveBox { w: f64, h: f64 },
    #[error("object id {id} out of range for identity table with {capacity} rows")]
    IdOutOfRange { id: usize, capacity: usize },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad tensor file: {0}")]
    Format(String),
    #[error("missing checkpoint for {method} at keep ratio {ratio}: {path}")]
    MissingCheckpoint {
        method: String,
        ratio: f64,
        path: PathBuf,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
