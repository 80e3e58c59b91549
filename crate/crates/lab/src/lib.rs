//! Experiment harness for `orthoflow-core`: configuration files, the
//! volume-tracking, marginal-equivalence and bias-correction experiments,
//! CSV/JSON run records, and bitwise replay.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod output;
pub mod record;
pub mod replay;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] orthoflow_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record schema version {found} is not supported (expected {expected})")]
    Schema { expected: u32, found: u32 },
    #[error("thread pool: {0}")]
    Pool(String),
}

impl LabError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
