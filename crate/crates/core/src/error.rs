use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure modes when reading a backbone checkpoint.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("checkpoint not found: {0}")]
    Missing(PathBuf),
    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("geometry mismatch: expected {field} = {expected}, checkpoint has {found}")]
    GeometryMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
}

/// One problem found while validating a corpus table or config document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    /// 1-based data row (header excluded), when the issue is row-specific.
    pub row: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.row {
            Some(row) => write!(f, "row {row}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("activation too small to pool: {channels}x{height}x{width} has fewer than 512 values")]
    TooSmallActivation {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("backbone is immutable: {0}")]
    Immutable(String),
    #[error("validation failed:\n{}", fmt_issues(.0))]
    Validation(Vec<Issue>),
    #[error("mask pixel ({x}, {y}) has off-palette color {rgba:?}")]
    MaskDecode { x: u32, y: u32, rgba: [u8; 4] },
    #[error("not enough samples in cell {cell}: need {needed}, have {available}")]
    Capacity {
        cell: String,
        needed: usize,
        available: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("sample {id}: {reason}")]
    Data { id: String, reason: String },
    #[error("ROC-AUC undefined: labels contain a single class")]
    UndefinedAuc,
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("head checkpoint: {0}")]
    HeadFormat(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn fmt_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}
