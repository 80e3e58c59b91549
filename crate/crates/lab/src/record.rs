//! `record.json`: what was run, with which configuration, and digests of the results.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// Version of the record and CSV layout; bumped on incompatible changes.
pub const SCHEMA_VERSION: u32 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub metrics: BTreeMap<String, f64>,
    pub endpoint_digest: String,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunRecord>,
    pub duration_ms: f64,
}

impl Record {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| LabError::Config(format!("{}: missing schema_version", path.display())))?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(LabError::Schema {
                expected: SCHEMA_VERSION,
                found: found.try_into().unwrap_or(u32::MAX),
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
    }

    pub fn digests(&self) -> BTreeMap<&str, &str> {
        self.runs
            .iter()
            .map(|r| (r.run_id.as_str(), r.endpoint_digest.as_str()))
            .collect()
    }
}

/// Dotted paths of every leaf that differs between two JSON documents.
pub fn json_diff(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into("", a, b, &mut out);
    out
}

fn diff_into(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    let child = |key: &str| {
        if path.is_empty() {
            key.to_string()
        } else {
            format!("{path}.{key}")
        }
    };
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_into(&child(k), u, v, out),
                    _ => out.push(child(k)),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            let before = out.len();
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                diff_into(&format!("{path}[{i}]"), u, v, out);
            }
            // a changed scalar array reads better as one key
            if out.len() > before && x.iter().all(|v| !v.is_object() && !v.is_array()) {
                out.truncate(before);
                out.push(path.to_string());
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn diff_lists_changed_leaves() {
        let a = json!({"injection": {"alpha": 1.0, "steps": [1]}, "experiment": {"seeds": [1, 2]}});
        let b = json!({"injection": {"alpha": 0.5, "steps": [1]}, "experiment": {"seeds": [1, 3]}});
        assert_eq!(json_diff(&a, &b), vec!["experiment.seeds", "injection.alpha"]);
        assert!(json_diff(&a, &a).is_empty());
        let c = json!({"family": {"modes": [{"name": "a", "var": 1.0}]}});
        let d = json!({"family": {"modes": [{"name": "a", "var": 2.0}]}});
        assert_eq!(json_diff(&c, &d), vec!["family.modes[0].var"]);
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("record.json");
        std::fs::write(&path, r#"{"schema_version": 99}"#).unwrap();
        assert!(matches!(Record::load(&path), Err(LabError::Schema { found: 99, .. })));
    }
}
