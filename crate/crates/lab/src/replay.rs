//! Rerun a recorded experiment and compare its endpoints bit for bit.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::record::{json_diff, Record};
use crate::run::{execute, Command};
use crate::{LabError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub command: String,
    /// Config keys whose value in `config.toml` differs from the record.
    pub changed_keys: Vec<String>,
    pub hash_matches: bool,
    /// Runs whose endpoint digest differs, or that exist on only one side.
    pub mismatched_runs: Vec<String>,
    pub runs_checked: usize,
}

impl ReplayReport {
    pub fn passed(&self) -> bool {
        self.changed_keys.is_empty() && self.hash_matches && self.mismatched_runs.is_empty()
    }
}

/// `path` may be a run directory or its `record.json`.
fn locate(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join("record.json"), path.join("config.toml"))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        (path.to_path_buf(), dir.join("config.toml"))
    }
}

pub fn replay(path: &Path, jobs: usize) -> Result<ReplayReport> {
    let (record_path, config_path) = locate(path);
    let record = Record::load(&record_path)?;
    let cfg = ExperimentConfig::load(&config_path)?;
    let command = Command::parse(&record.command)
        .ok_or_else(|| LabError::Config(format!("record names unknown command `{}`", record.command)))?;
    let changed_keys = json_diff(&record.config, &cfg.canonical_json());
    let hash_matches = record.config_hash == cfg.hash();

    let outcome = execute(command, &cfg, jobs)?;
    let fresh = outcome.digests();
    let recorded = record.digests();
    let mut mismatched_runs: Vec<String> = recorded
        .iter()
        .filter(|(id, digest)| fresh.get(**id).map(String::as_str) != Some(**digest))
        .map(|(id, _)| id.to_string())
        .collect();
    mismatched_runs.extend(fresh.keys().filter(|id| !recorded.contains_key(id.as_str())).cloned());
    Ok(ReplayReport {
        command: record.command.clone(),
        changed_keys,
        hash_matches,
        mismatched_runs,
        runs_checked: recorded.len(),
    })
}
