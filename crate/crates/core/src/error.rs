//! Error types shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed caller input: shape mismatches, out-of-range labels, bad arguments.
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent configuration, e.g. noise or mask dimensions that do not
    /// match the model they are applied to.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion failure, carrying the offending path.
    #[error("ingestion error at {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    /// Training diverged or failed to make progress.
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// An iterative optimization (PGD, mask search, trigger inversion) failed.
    #[error("optimization error at step {step}: {msg}")]
    Optimization { step: usize, msg: String },

    /// Evaluation could not be carried out, e.g. an empty eligible sample set.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A plot was requested whose prerequisite artifacts are missing.
    #[error("plotting error: missing prerequisite {0}")]
    Plot(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for input-side problems, 3 for
    /// training/optimization failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training { .. } | Error::Optimization { .. } => 3,
            _ => 2,
        }
    }
}
