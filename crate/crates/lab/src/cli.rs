//! The `orthoflow` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DriftName, ExperimentConfig, ModeName, ScoreSourceName};
use crate::replay::replay;
use crate::run::{run_to_dir, Command};
use crate::Result;

pub const VOLUME_CONFIG: &str = include_str!("../configs/volume.toml");
pub const MARGINAL_CONFIG: &str = include_str!("../configs/marginal.toml");
pub const BENCH_CONFIG: &str = include_str!("../configs/bench.toml");

#[derive(Debug, Parser)]
#[command(
    name = "orthoflow",
    version,
    about = "Synthetic flow-sampling experiments with orthogonal velocity injection"
)]
pub struct Cli {
    /// Experiment configuration (TOML); each command has a built-in default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to `runs/<command>-<config hash prefix>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run a single master seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Gram log-volume of an eight-particle ODE ensemble at every step.
    VolumeTrack(SamplerArgs),
    /// Permutation tests of SDE against ODE marginals at checkpoints.
    MarginalCheck(SamplerArgs),
    /// Paired minority-correction benchmark: baseline, treatment and control.
    BiasBench(SamplerArgs),
    /// Sample every condition and write full trajectories.
    Sample(SamplerArgs),
    /// Rerun a recorded run directory and compare endpoint digests.
    Replay {
        /// Run directory or its `record.json`.
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct SamplerArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Integration steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Noise level `a` of the SDE schedule.
    #[arg(long)]
    pub noise_a: Option<f64>,
    #[arg(long, value_enum)]
    pub score_source: Option<ScoreSourceName>,
    #[arg(long, value_enum)]
    pub drift: Option<DriftName>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Teacher bias toward the majority mode.
    #[arg(long)]
    pub bias: Option<f64>,
    /// Injection scale.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub proj_eps: Option<f64>,
    /// Single 1-based injection step.
    #[arg(long, conflicts_with = "inject_steps")]
    pub start_step: Option<usize>,
    /// Comma-separated 1-based injection steps.
    #[arg(long, value_delimiter = ',')]
    pub inject_steps: Option<Vec<usize>>,
    /// Comma-separated token names hidden from the student.
    #[arg(long, value_delimiter = ',')]
    pub mask_tokens: Option<Vec<String>>,
}

impl SamplerArgs {
    /// Writes every given flag into `cfg`. Particle and step counts of the
    /// marginal check live in its own section.
    pub fn apply(&self, command: Command, cfg: &mut ExperimentConfig) {
        let marginal = command == Command::MarginalCheck;
        if let Some(m) = self.mode {
            cfg.sampler.mode = m;
        }
        if let Some(k) = self.steps {
            if marginal {
                cfg.marginal.steps = k;
            } else {
                cfg.sampler.steps = k;
            }
        }
        if let Some(n) = self.particles {
            if marginal {
                cfg.marginal.particles = n;
            } else {
                cfg.experiment.particles = n;
            }
        }
        if let Some(a) = self.noise_a {
            cfg.sampler.noise_level = a;
        }
        if let Some(s) = self.score_source {
            cfg.sampler.score_source = s;
        }
        if let Some(d) = self.drift {
            cfg.sampler.drift = d;
        }
        if let Some(b) = self.bias {
            cfg.teacher.bias = b;
        }
        if let Some(a) = self.alpha {
            cfg.injection.alpha = a;
        }
        if let Some(e) = self.proj_eps {
            cfg.injection.proj_eps = e;
        }
        if let Some(k) = self.start_step {
            cfg.injection.steps = vec![k];
        }
        if let Some(steps) = &self.inject_steps {
            cfg.injection.steps = steps.clone();
        }
        if let Some(tokens) = &self.mask_tokens {
            cfg.injection.mask_tokens = tokens.clone();
        }
    }
}

pub fn default_config(command: Command) -> &'static str {
    match command {
        Command::VolumeTrack => VOLUME_CONFIG,
        Command::MarginalCheck => MARGINAL_CONFIG,
        Command::BiasBench | Command::Sample => BENCH_CONFIG,
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs the parsed command, printing its summary; `Ok(false)` means a replay mismatch.
pub fn run(cli: Cli) -> Result<bool> {
    let jobs = cli.jobs.unwrap_or_else(default_jobs);
    let (command, args) = match cli.command {
        CliCommand::VolumeTrack(a) => (Command::VolumeTrack, a),
        CliCommand::MarginalCheck(a) => (Command::MarginalCheck, a),
        CliCommand::BiasBench(a) => (Command::BiasBench, a),
        CliCommand::Sample(a) => (Command::Sample, a),
        CliCommand::Replay { path } => {
            let report = replay(&path, jobs)?;
            for key in &report.changed_keys {
                println!("config changed: {key}");
            }
            if !report.hash_matches {
                println!("config hash differs from the record");
            }
            for id in &report.mismatched_runs {
                println!("endpoint digest differs: {id}");
            }
            let verdict = if report.passed() { "ok" } else { "FAILED" };
            println!(
                "replay {}: {} runs checked, {verdict}",
                report.command, report.runs_checked
            );
            return Ok(report.passed());
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::from_toml_str(default_config(command))?,
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    args.apply(command, &mut cfg);
    let out = cli
        .out
        .unwrap_or_else(|| Path::new("runs").join(format!("{}-{}", command.as_str(), &cfg.hash()[..8])));
    let (outcome, _) = run_to_dir(command, &cfg, jobs, &out)?;
    print!("{}", outcome.summary());
    println!("wrote {}", out.display());
    Ok(true)
}
