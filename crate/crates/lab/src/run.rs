//! Command dispatch: run an experiment, summarize it, and write its run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::ExperimentConfig;
use crate::experiment::{
    bias_bench, marginal_check, sample_runs, volume_track, BenchResult, EnsembleRun, MarginalResult, Runner, VolumeRun,
};
use crate::output::{self, MetricRow};
use crate::record::{Record, RunRecord, SCHEMA_VERSION, TOOL_VERSION};
use crate::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    VolumeTrack,
    MarginalCheck,
    BiasBench,
    Sample,
}

impl Command {
    pub const ALL: [Command; 4] = [
        Command::VolumeTrack,
        Command::MarginalCheck,
        Command::BiasBench,
        Command::Sample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Command::VolumeTrack => "volume-track",
            Command::MarginalCheck => "marginal-check",
            Command::BiasBench => "bias-bench",
            Command::Sample => "sample",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == name)
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Volume(Vec<VolumeRun>),
    Marginal(MarginalResult),
    Bench(BenchResult),
    Sample(Vec<EnsembleRun>),
}

pub fn execute(command: Command, cfg: &ExperimentConfig, jobs: usize) -> Result<Outcome> {
    let built = cfg.build()?;
    let runner = Runner::new(jobs)?;
    Ok(match command {
        Command::VolumeTrack => Outcome::Volume(volume_track(cfg, &built, &runner)?),
        Command::MarginalCheck => Outcome::Marginal(marginal_check(cfg, &built, &runner)?),
        Command::BiasBench => Outcome::Bench(bias_bench(cfg, &built, &runner)?),
        Command::Sample => Outcome::Sample(sample_runs(cfg, &built, &runner)?),
    })
}

impl Outcome {
    pub fn ensembles(&self) -> Vec<&EnsembleRun> {
        match self {
            Outcome::Volume(runs) => runs.iter().map(|r| &r.ensemble).collect(),
            Outcome::Marginal(m) => m.ensembles.iter().collect(),
            Outcome::Bench(b) => b.runs.iter().map(|r| &r.ensemble).collect(),
            Outcome::Sample(runs) => runs.iter().collect(),
        }
    }

    /// Endpoint digest of every run, keyed by run id.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.ensembles()
            .into_iter()
            .map(|e| (e.run_id.clone(), e.digest()))
            .collect()
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let row = |metric: &str, run_id: &str, step: Option<usize>, value: f64| MetricRow {
            metric: metric.into(),
            run_id: run_id.into(),
            step,
            value,
        };
        let mut rows = Vec::new();
        match self {
            Outcome::Volume(runs) => {
                for r in runs {
                    for (k, lv) in r.trace.log_volume.iter().enumerate() {
                        rows.push(row("log_volume", &r.ensemble.run_id, Some(k), *lv));
                    }
                }
            }
            Outcome::Marginal(m) => {
                for r in &m.rows {
                    let id = format!("trial{}/{}", r.trial, r.arm.as_str());
                    rows.push(row("energy", &id, Some(r.checkpoint), r.statistic));
                    rows.push(row("p_value", &id, Some(r.checkpoint), r.p_value));
                }
            }
            Outcome::Bench(b) => {
                for r in &b.runs {
                    let hits = r.outcomes.iter().filter(|o| o.hit()).count();
                    rows.push(row(
                        "hit_rate",
                        &r.ensemble.run_id,
                        None,
                        hits as f64 / r.outcomes.len().max(1) as f64,
                    ));
                }
            }
            Outcome::Sample(_) => {}
        }
        rows
    }

    fn run_metrics(&self, ensemble: &EnsembleRun) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("clamps_applied".into(), ensemble.batch.clamps_applied() as f64);
        match self {
            Outcome::Volume(runs) => {
                if let Some(r) = runs.iter().find(|r| r.ensemble.run_id == ensemble.run_id) {
                    let lv = &r.trace.log_volume;
                    m.insert("log_volume_first".into(), lv[0]);
                    m.insert("log_volume_last".into(), lv[lv.len() - 1]);
                    if let Some(k) = r.trace.largest_drop_step() {
                        m.insert("largest_drop_step".into(), k as f64);
                    }
                }
            }
            Outcome::Bench(b) => {
                if let Some(r) = b.runs.iter().find(|r| r.ensemble.run_id == ensemble.run_id) {
                    let hits = r.outcomes.iter().filter(|o| o.hit()).count();
                    m.insert("hit_rate".into(), hits as f64 / r.outcomes.len().max(1) as f64);
                }
            }
            Outcome::Marginal(res) => {
                if let Some((trial, arm)) = ensemble.run_id.split_once('/') {
                    for r in &res.rows {
                        if format!("trial{}", r.trial) == trial && r.arm.as_str() == arm {
                            m.insert(format!("p_value_t{}", r.t), r.p_value);
                        }
                    }
                }
            }
            Outcome::Sample(_) => {}
        }
        m.retain(|_, v| v.is_finite());
        m
    }

    pub fn run_records(&self) -> Vec<RunRecord> {
        self.ensembles()
            .into_iter()
            .map(|e| RunRecord {
                run_id: e.run_id.clone(),
                seed: e.seed,
                mode: e.mode.clone(),
                metrics: self.run_metrics(e),
                endpoint_digest: e.digest(),
                duration_ms: e.elapsed.as_secs_f64() * 1e3,
            })
            .collect()
    }

    /// Human-readable result lines.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        match self {
            Outcome::Volume(runs) => {
                let collapsed = runs.iter().filter(|r| r.trace.collapsed()).count();
                for r in runs {
                    let lv = &r.trace.log_volume;
                    let _ = writeln!(
                        s,
                        "{}: log-volume {:.3} -> {:.3}, largest drop at step {}",
                        r.ensemble.run_id,
                        lv[0],
                        lv[lv.len() - 1],
                        r.trace.largest_drop_step().map_or("-".into(), |k| k.to_string())
                    );
                }
                let _ = writeln!(s, "final below initial in {collapsed}/{} seeds", runs.len());
            }
            Outcome::Marginal(m) => {
                for (c, t) in m.checkpoint_times.iter().enumerate() {
                    let _ = writeln!(s, "t = {t:.3}: sde passes in {}/{} trials", m.sde_passes(c), m.trials);
                }
                let _ = writeln!(
                    s,
                    "score-dropped control fails somewhere in {}/{} trials",
                    m.control_failures(),
                    m.trials
                );
            }
            Outcome::Bench(b) => {
                let rate = |r: Option<f64>| r.map_or("n/a".into(), |v| format!("{v:.3}"));
                for seed in &b.per_seed {
                    let _ = writeln!(
                        s,
                        "seed {}: baseline hit {:.3}, correction {} (control {})",
                        seed.seed,
                        seed.treatment.baseline_hit_rate(),
                        rate(seed.treatment.rate()),
                        rate(seed.control.rate())
                    );
                }
                let _ = writeln!(
                    s,
                    "all: baseline hit {:.3}, correction {} (control {}) over {} failures",
                    b.treatment.baseline_hit_rate(),
                    rate(b.treatment.rate()),
                    rate(b.control.rate()),
                    b.treatment.failures
                );
            }
            Outcome::Sample(runs) => {
                for r in runs {
                    let _ = writeln!(
                        s,
                        "{}: {} particles, digest {}",
                        r.run_id,
                        r.batch.particles(),
                        r.digest()
                    );
                }
            }
        }
        s
    }

    fn write_csvs(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
        output::write_metrics(dir, &self.metric_rows())?;
        let condition_names: Vec<String> = cfg.conditions.iter().map(|c| c.name.clone()).collect();
        let mode_names: Vec<String> = cfg.family.modes.iter().map(|m| m.name.clone()).collect();
        match self {
            Outcome::Volume(runs) => {
                output::write_volume(dir, runs)?;
                output::write_trajectories(dir, &self.ensembles())
            }
            Outcome::Marginal(m) => {
                output::write_marginal(dir, m)?;
                output::write_marginal_samples(dir, m)
            }
            Outcome::Bench(b) => {
                output::write_bench(dir, b, &condition_names)?;
                output::write_bench_endpoints(dir, b, &condition_names, &mode_names)
            }
            Outcome::Sample(_) => output::write_trajectories(dir, &self.ensembles()),
        }
    }
}

/// Runs `command` and writes `config.toml`, `record.json` and the CSVs into `out`.
pub fn run_to_dir(command: Command, cfg: &ExperimentConfig, jobs: usize, out: &Path) -> Result<(Outcome, Record)> {
    let start = Instant::now();
    let outcome = execute(command, cfg, jobs)?;
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml_string()?).map_err(|e| LabError::io(&config_path, e))?;
    outcome.write_csvs(out, cfg)?;
    let record = Record {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.into(),
        command: command.as_str().into(),
        config_hash: cfg.hash(),
        config: cfg.canonical_json(),
        runs: outcome.run_records(),
        duration_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    record.save(&out.join("record.json"))?;
    Ok((outcome, record))
}
