use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("no data directory configured; pass --data-dir or set {env} (expected files: {files})")]
    MissingDataDir { env: &'static str, files: String },

    #[error("bad magic number {found} in {} (expected {expected})", .path.display())]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("count mismatch in {}: {detail}", .path.display())]
    CountMismatch { path: PathBuf, detail: String },

    #[error("no MemNet initialized for task {0}")]
    MissingMemNet(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at task {task}, epoch {epoch}, batch {batch}")]
    NonFinite {
        task: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("anchor mismatch: {0}")]
    AnchorMismatch(String),

    #[error("incomplete error matrix: {0}")]
    IncompleteMatrix(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        detail: detail.into(),
    })
}
