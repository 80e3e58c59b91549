//! CSV files of a run directory. Column layouts are listed in `schema/csv_schema.json`.

use std::fs::File;
use std::path::Path;

use orthoflow_core::diagnostics::BenchReport;

use crate::experiment::{Arm, BenchResult, EnsembleRun, MarginalResult, VolumeRun};
use crate::{LabError, Result};

/// Particles per ensemble written to `marginal_samples.csv`.
pub const MARGINAL_SAMPLE_ROWS: usize = 2000;

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| LabError::io(&path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Shortest round-trip formatting; `-inf` for an exactly degenerate volume.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn coordinate_header(prefix: &[&str], dim: usize) -> Vec<String> {
    prefix
        .iter()
        .map(|s| s.to_string())
        .chain((0..dim).map(|j| format!("x_{j}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub run_id: String,
    pub step: Option<usize>,
    pub value: f64,
}

pub fn write_metrics(dir: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = writer(dir, "metrics.csv")?;
    w.write_record(["metric", "run_id", "step", "value"])?;
    for r in rows {
        let step = r.step.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.metric.as_str(),
            r.run_id.as_str(),
            step.as_str(),
            fmt_f64(r.value).as_str(),
        ])?;
    }
    w.flush().map_err(|e| LabError::io(&dir.join("metrics.csv"), e))
}

/// Every retained state of every particle.
pub fn write_trajectories(dir: &Path, runs: &[&EnsembleRun]) -> Result<()> {
    let dim = runs.first().map_or(0, |r| r.batch.dim());
    let mut w = writer(dir, "trajectories.csv")?;
    w.write_record(coordinate_header(&["run_id", "particle", "step", "t"], dim))?;
    for run in runs {
        let b = &run.batch;
        for p in 0..b.particles() {
            for (slot, &k) in b.knots().iter().enumerate() {
                let mut rec = vec![
                    run.run_id.clone(),
                    p.to_string(),
                    k.to_string(),
                    fmt_f64(b.grid().knots()[k]),
                ];
                rec.extend(b.state(p, slot).iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(|e| LabError::io(&dir.join("trajectories.csv"), e))
}

pub fn write_volume(dir: &Path, runs: &[VolumeRun]) -> Result<()> {
    let mut w = writer(dir, "volume.csv")?;
    w.write_record(["run_id", "seed", "step", "t", "log_volume"])?;
    for r in runs {
        for (k, (t, lv)) in r.trace.times.iter().zip(&r.trace.log_volume).enumerate() {
            w.write_record([
                r.ensemble.run_id.clone(),
                r.ensemble.seed.to_string(),
                k.to_string(),
                fmt_f64(*t),
                fmt_f64(*lv),
            ])?;
        }
    }
    w.flush().map_err(|e| LabError::io(&dir.join("volume.csv"), e))
}

fn bench_rows(w: &mut csv::Writer<File>, seed: &str, arm: Arm, report: &BenchReport, names: &[String]) -> Result<()> {
    let rate = |r: Option<f64>| r.map(fmt_f64).unwrap_or_default();
    for c in &report.per_condition {
        w.write_record([
            seed.to_string(),
            arm.as_str().to_string(),
            names[c.condition].clone(),
            c.cells.to_string(),
            c.failures.to_string(),
            c.corrected.to_string(),
            rate(c.rate()),
        ])?;
    }
    w.write_record([
        seed.to_string(),
        arm.as_str().to_string(),
        "all".to_string(),
        report.cells.to_string(),
        report.failures.to_string(),
        report.corrected.to_string(),
        rate(report.rate()),
    ])?;
    Ok(())
}

/// Correction counts per seed and condition, plus `all` aggregates; an empty
/// rate means the baseline never failed.
pub fn write_bench(dir: &Path, result: &BenchResult, condition_names: &[String]) -> Result<()> {
    let mut w = writer(dir, "bench.csv")?;
    w.write_record([
        "seed",
        "arm",
        "condition",
        "cells",
        "baseline_failures",
        "corrected",
        "rate",
    ])?;
    for s in &result.per_seed {
        let seed = s.seed.to_string();
        bench_rows(&mut w, &seed, Arm::Treatment, &s.treatment, condition_names)?;
        bench_rows(&mut w, &seed, Arm::Control, &s.control, condition_names)?;
    }
    bench_rows(&mut w, "all", Arm::Treatment, &result.treatment, condition_names)?;
    bench_rows(&mut w, "all", Arm::Control, &result.control, condition_names)?;
    w.flush().map_err(|e| LabError::io(&dir.join("bench.csv"), e))
}

/// Final states of every bench cell with their mode assignment.
pub fn write_bench_endpoints(
    dir: &Path,
    result: &BenchResult,
    condition_names: &[String],
    mode_names: &[String],
) -> Result<()> {
    let dim = result.runs.first().map_or(0, |r| r.ensemble.batch.dim());
    let mut w = writer(dir, "endpoints.csv")?;
    w.write_record(coordinate_header(
        &["run_id", "seed", "condition", "arm", "particle", "assigned", "hit"],
        dim,
    ))?;
    for run in &result.runs {
        let b = &run.ensemble.batch;
        for (o, x) in run.outcomes.iter().zip(b.endpoints()) {
            let mut rec = vec![
                run.ensemble.run_id.clone(),
                o.key.seed.to_string(),
                condition_names[o.key.condition].clone(),
                run.arm.as_str().to_string(),
                o.key.particle.to_string(),
                mode_label(run.ensemble.condition, o.assigned, result, mode_names),
                (o.hit() as u8).to_string(),
            ];
            rec.extend(x.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| LabError::io(&dir.join("endpoints.csv"), e))
}

fn mode_label(condition: usize, assigned: usize, result: &BenchResult, mode_names: &[String]) -> String {
    result
        .reference_modes
        .get(condition)
        .and_then(|m| m.get(assigned))
        .and_then(|&i| mode_names.get(i))
        .cloned()
        .unwrap_or_else(|| assigned.to_string())
}

pub fn write_marginal(dir: &Path, result: &MarginalResult) -> Result<()> {
    let mut w = writer(dir, "marginal.csv")?;
    w.write_record(["trial", "checkpoint_t", "arm", "energy", "p_value", "pass"])?;
    for r in &result.rows {
        w.write_record([
            r.trial.to_string(),
            fmt_f64(r.t),
            r.arm.as_str().to_string(),
            fmt_f64(r.statistic),
            fmt_f64(r.p_value),
            ((r.p_value > result.level) as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| LabError::io(&dir.join("marginal.csv"), e))
}

/// The first [`MARGINAL_SAMPLE_ROWS`] particles of each first-trial ensemble
/// at every checkpoint, for overlay histograms.
pub fn write_marginal_samples(dir: &Path, result: &MarginalResult) -> Result<()> {
    let dim = result.ensembles.first().map_or(0, |r| r.batch.dim());
    let mut w = writer(dir, "marginal_samples.csv")?;
    w.write_record(coordinate_header(&["ensemble", "checkpoint_t", "particle"], dim))?;
    for run in result.ensembles.iter().filter(|r| r.run_id.starts_with("trial0/")) {
        let b = &run.batch;
        let label = run.run_id.trim_start_matches("trial0/");
        for (slot, &k) in b.knots().iter().enumerate() {
            for p in 0..b.particles().min(MARGINAL_SAMPLE_ROWS) {
                let mut rec = vec![label.to_string(), fmt_f64(b.grid().knots()[k]), p.to_string()];
                rec.extend(b.state(p, slot).iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()
        .map_err(|e| LabError::io(&dir.join("marginal_samples.csv"), e))
}
