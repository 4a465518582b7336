use std::path::PathBuf;

use thiserror::Error;

/// Things that can go wrong anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("batch norm needs at least two statistical elements per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("memory plan infeasible: budget {budget} bytes, minimal feasible budget is {minimal} bytes")]
    MemoryPlan { budget: u64, minimal: u64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("checkpoint version {found} is not supported (expected {expected}); re-export the checkpoint with a matching release")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
