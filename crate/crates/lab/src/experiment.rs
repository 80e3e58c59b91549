//! The three experiments, independent of any file output.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use orthoflow_core::bias::Condition;
use orthoflow_core::diagnostics::{
    correction_rate, energy_test, volume_trace, BenchReport, CellKey, CellOutcome, EnergyMethod, EnergyTestConfig,
    VolumeTrace, VOLUME_PARTICLES,
};
use orthoflow_core::grid::TimeGrid;
use orthoflow_core::rng::child_seed;
use orthoflow_core::sampler::{
    DriftCorrection, NoiseSchedule, Retention, Sampler, SamplerConfig, ScoreSource, TrajectoryBatch,
};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{Built, ExperimentConfig, ModeName};
use crate::{LabError, Result};

/// Worker pool; results are always assembled in index order, so the output
/// does not depend on the number of workers.
pub struct Runner {
    pool: rayon::ThreadPool,
}

impl Runner {
    pub fn new(jobs: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| LabError::Pool(e.to_string()))?;
        Ok(Self { pool })
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }

    /// Runs `particles` particles of `sampler` under `seed`.
    pub fn ensemble(&self, sampler: &Sampler, seed: u64, particles: usize) -> Result<TrajectoryBatch> {
        Ok(self.timed_ensemble(sampler, seed, particles)?.0)
    }

    /// [`Self::ensemble`] with its wall-clock duration.
    pub fn timed_ensemble(
        &self,
        sampler: &Sampler,
        seed: u64,
        particles: usize,
    ) -> Result<(TrajectoryBatch, Duration)> {
        let start = Instant::now();
        let runs = self.map(particles, |i| Ok(sampler.run_particle(seed, i as u64)?))?;
        Ok((TrajectoryBatch::from_runs(sampler, seed, runs), start.elapsed()))
    }
}

/// SHA-256 over the little-endian bytes of every particle's final state.
pub fn endpoint_digest(batch: &TrajectoryBatch) -> String {
    let mut h = Sha256::new();
    for x in batch.endpoints() {
        for v in x {
            h.update(v.to_le_bytes());
        }
    }
    crate::config::hex_digest(h.finalize().as_slice())
}

/// One sampled ensemble with its identity in the run record.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub run_id: String,
    pub elapsed: Duration,
    pub seed: u64,
    pub mode: String,
    pub condition: usize,
    pub batch: TrajectoryBatch,
}

impl EnsembleRun {
    pub fn digest(&self) -> String {
        endpoint_digest(&self.batch)
    }
}

fn sampler_for(cfg: &SamplerConfig, built: &Built, condition: &Condition, retention: &Retention) -> Result<Sampler> {
    Ok(Sampler::new(
        cfg,
        &built.teacher,
        Some(&built.student),
        condition,
        retention,
    )?)
}

#[derive(Debug, Clone)]
pub struct VolumeRun {
    pub ensemble: EnsembleRun,
    pub trace: VolumeTrace,
}

/// Deterministic ODE sampling of 8 particles per seed under the first
/// condition, with the log-volume of the particle cloud at every knot.
pub fn volume_track(cfg: &ExperimentConfig, built: &Built, runner: &Runner) -> Result<Vec<VolumeRun>> {
    if cfg.experiment.particles != VOLUME_PARTICLES {
        return Err(LabError::Config(format!(
            "volume-track needs experiment.particles = {VOLUME_PARTICLES}, got {}",
            cfg.experiment.particles
        )));
    }
    if cfg.family.dim < VOLUME_PARTICLES - 1 {
        return Err(LabError::Config(format!(
            "volume-track needs family.dim >= {}, got {}",
            VOLUME_PARTICLES - 1,
            cfg.family.dim
        )));
    }
    let sampler_cfg = cfg.sampler_config(ModeName::Ode)?;
    let sampler = sampler_for(&sampler_cfg, built, &built.conditions[0], &Retention::All)?;
    cfg.experiment
        .seeds
        .iter()
        .map(|&seed| {
            let (batch, elapsed) = runner.timed_ensemble(&sampler, seed, VOLUME_PARTICLES)?;
            let trace = volume_trace(&batch)?;
            Ok(VolumeRun {
                ensemble: EnsembleRun {
                    run_id: format!("seed{seed}/ode"),
                    elapsed,
                    seed,
                    mode: "ode".into(),
                    condition: 0,
                    batch,
                },
                trace,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    /// Plain ODE sampling with the biased teacher.
    Baseline,
    /// Injected velocity, then SDE fission.
    Treatment,
    /// SDE fission with the control injection scale (no injection by default).
    Control,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::Treatment, Arm::Control];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Treatment => "treatment",
            Arm::Control => "control",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub ensemble: EnsembleRun,
    pub outcomes: Vec<CellOutcome>,
}

#[derive(Debug, Clone)]
pub struct SeedReports {
    pub seed: u64,
    pub treatment: BenchReport,
    pub control: BenchReport,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub runs: Vec<ArmRun>,
    /// Per condition, the family mode behind each scoring component
    /// (`usize::MAX` for a relation-shifted component).
    pub reference_modes: Vec<Vec<usize>>,
    pub per_seed: Vec<SeedReports>,
    pub treatment: BenchReport,
    pub control: BenchReport,
}

impl BenchResult {
    pub fn outcomes(&self, arm: Arm) -> Vec<CellOutcome> {
        self.runs
            .iter()
            .filter(|r| r.arm == arm)
            .flat_map(|r| r.outcomes.iter().cloned())
            .collect()
    }
}

/// Paired baseline / treatment / control runs over every (seed, condition,
/// particle) cell. All arms of a cell start from the same initial noise.
pub fn bias_bench(cfg: &ExperimentConfig, built: &Built, runner: &Runner) -> Result<BenchResult> {
    if cfg.injection.mask_tokens.is_empty() {
        return Err(LabError::Config(
            "bias-bench needs injection.mask_tokens so the student sees a different condition".into(),
        ));
    }
    let baseline_cfg = cfg.sampler_config(ModeName::Ode)?;
    let treatment_cfg = cfg.sampler_config(ModeName::Injectflow)?;
    let mut control_cfg = treatment_cfg.clone();
    if let Some(inj) = control_cfg.injection.as_mut() {
        inj.alpha = cfg.bench.control_alpha;
    }
    let last = baseline_cfg.grid.steps();
    let retention = Retention::Knots([0, last].into_iter().collect());
    let particles = cfg.experiment.particles;

    let mut runs = Vec::new();
    let mut reference_modes = Vec::with_capacity(built.conditions.len());
    for condition in &built.conditions {
        let (reference, _) = built.family.scoring_reference(condition)?;
        let modes = reference
            .components()
            .iter()
            .map(|c| built.family.modes().iter().position(|m| m == c).unwrap_or(usize::MAX))
            .collect();
        reference_modes.push(modes);
    }
    for &seed in &cfg.experiment.seeds {
        for (ci, condition) in built.conditions.iter().enumerate() {
            let (reference, targets) = built.family.scoring_reference(condition)?;
            for arm in Arm::ALL {
                let sampler_cfg = match arm {
                    Arm::Baseline => &baseline_cfg,
                    Arm::Treatment => &treatment_cfg,
                    Arm::Control => &control_cfg,
                };
                let sampler = sampler_for(sampler_cfg, built, condition, &retention)?;
                let (batch, elapsed) = runner.timed_ensemble(&sampler, seed, particles)?;
                let outcomes = batch
                    .endpoints()
                    .iter()
                    .enumerate()
                    .map(|(p, x)| {
                        let key = CellKey {
                            condition: ci,
                            seed,
                            particle: p as u64,
                        };
                        Ok(CellOutcome::score(key, &reference, &targets, x)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                runs.push(ArmRun {
                    arm,
                    ensemble: EnsembleRun {
                        run_id: format!("seed{seed}/{}/{}", cfg.conditions[ci].name, arm.as_str()),
                        elapsed,
                        seed,
                        mode: match arm {
                            Arm::Baseline => "ode".into(),
                            _ => "injectflow".into(),
                        },
                        condition: ci,
                        batch,
                    },
                    outcomes,
                });
            }
        }
    }

    let pick = |arm: Arm, seed: Option<u64>| -> Vec<CellOutcome> {
        runs.iter()
            .filter(|r| r.arm == arm && seed.is_none_or(|s| r.ensemble.seed == s))
            .flat_map(|r| r.outcomes.iter().cloned())
            .collect()
    };
    let per_seed = cfg
        .experiment
        .seeds
        .iter()
        .map(|&seed| {
            let base = pick(Arm::Baseline, Some(seed));
            Ok(SeedReports {
                seed,
                treatment: correction_rate(&base, &pick(Arm::Treatment, Some(seed)))?,
                control: correction_rate(&base, &pick(Arm::Control, Some(seed)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let base = pick(Arm::Baseline, None);
    let treatment = correction_rate(&base, &pick(Arm::Treatment, None))?;
    let control = correction_rate(&base, &pick(Arm::Control, None))?;
    Ok(BenchResult {
        runs,
        reference_modes,
        per_seed,
        treatment,
        control,
    })
}

/// Ensembles compared against the reference ODE ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalArm {
    /// SDE with the score-corrected drift.
    Sde,
    /// SDE with the score term dropped.
    Control,
    /// ODE with fresh initial noise: the null reference for the statistic.
    Resample,
}

impl MarginalArm {
    pub const ALL: [MarginalArm; 3] = [MarginalArm::Sde, MarginalArm::Control, MarginalArm::Resample];

    pub fn as_str(self) -> &'static str {
        match self {
            MarginalArm::Sde => "sde",
            MarginalArm::Control => "control",
            MarginalArm::Resample => "resample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalRow {
    pub trial: usize,
    pub checkpoint: usize,
    pub t: f64,
    pub arm: MarginalArm,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct MarginalResult {
    pub rows: Vec<MarginalRow>,
    /// Ensembles of every trial: reference, then one per arm.
    pub ensembles: Vec<EnsembleRun>,
    pub level: f64,
    pub trials: usize,
    pub checkpoint_times: Vec<f64>,
}

impl MarginalResult {
    fn row(&self, trial: usize, checkpoint: usize, arm: MarginalArm) -> &MarginalRow {
        self.rows
            .iter()
            .find(|r| r.trial == trial && r.checkpoint == checkpoint && r.arm == arm)
            .expect("every trial, checkpoint and arm has a row")
    }

    /// Trials in which the SDE passes (`p > level`) at `checkpoint`.
    pub fn sde_passes(&self, checkpoint: usize) -> usize {
        (0..self.trials)
            .filter(|&t| self.row(t, checkpoint, MarginalArm::Sde).p_value > self.level)
            .count()
    }

    /// Trials in which the control fails (`p < level`) at some checkpoint.
    pub fn control_failures(&self) -> usize {
        (0..self.trials)
            .filter(|&t| {
                (0..self.checkpoint_times.len()).any(|c| self.row(t, c, MarginalArm::Control).p_value < self.level)
            })
            .count()
    }
}

/// ODE and SDE ensembles from independent initial noise, compared at the
/// checkpoint times with a permutation energy test. The SDE arm uses the
/// configured drift correction; the control always drops the score term.
pub fn marginal_check(cfg: &ExperimentConfig, built: &Built, runner: &Runner) -> Result<MarginalResult> {
    let m = &cfg.marginal;
    if m.trials == 0 || m.particles == 0 || m.checkpoints.is_empty() {
        return Err(LabError::Config(
            "marginal needs positive trials and particles and at least one checkpoint".into(),
        ));
    }
    if !(m.level > 0.0 && m.level < 1.0) {
        return Err(LabError::Config("marginal.level must lie in (0, 1)".into()));
    }
    let grid = TimeGrid::uniform(m.steps, cfg.sampler.delta_lo, cfg.sampler.delta_hi)
        .map_err(|e| LabError::Config(format!("marginal: {e}")))?;
    let mut knots = Vec::with_capacity(m.checkpoints.len());
    for &t in &m.checkpoints {
        if !(t >= cfg.sampler.delta_lo && t <= 1.0 - cfg.sampler.delta_hi) {
            return Err(LabError::Config(format!("marginal checkpoint {t} is outside the grid")));
        }
        knots.push(grid.nearest_index(t));
    }
    let kept: BTreeSet<usize> = knots.iter().copied().collect();
    if kept.len() != knots.len() {
        return Err(LabError::Config("marginal checkpoints snap to the same knot".into()));
    }
    let retention = Retention::Knots(kept);
    let schedule = NoiseSchedule::new(cfg.sampler.noise_level, cfg.sampler.delta_lo, cfg.sampler.delta_hi)
        .map_err(|e| LabError::Config(format!("sampler: {e}")))?;
    let ode_cfg = SamplerConfig::ode(grid.clone());
    let sde_cfg = SamplerConfig {
        drift: cfg.sampler.drift.into(),
        ..SamplerConfig::sde(grid.clone(), schedule, ScoreSource::Analytic)
    };
    let control_cfg = SamplerConfig {
        drift: DriftCorrection::Dropped,
        ..sde_cfg.clone()
    };
    let condition = &built.conditions[0];
    let ode = sampler_for(&ode_cfg, built, condition, &retention)?;
    let sde = sampler_for(&sde_cfg, built, condition, &retention)?;
    let control = sampler_for(&control_cfg, built, condition, &retention)?;
    let master = cfg.experiment.seeds[0];

    let mut rows = Vec::new();
    let mut ensembles = Vec::new();
    for trial in 0..m.trials {
        let seed_ref = child_seed(master, 2 * trial as u64);
        let seed_alt = child_seed(master, 2 * trial as u64 + 1);
        let (reference, reference_elapsed) = runner.timed_ensemble(&ode, seed_ref, m.particles)?;
        let arms = [
            (MarginalArm::Sde, runner.timed_ensemble(&sde, seed_alt, m.particles)?),
            (
                MarginalArm::Control,
                runner.timed_ensemble(&control, seed_alt, m.particles)?,
            ),
            (
                MarginalArm::Resample,
                runner.timed_ensemble(&ode, seed_alt, m.particles)?,
            ),
        ];
        let jobs: Vec<(usize, usize)> = (0..knots.len())
            .flat_map(|c| (0..arms.len()).map(move |a| (c, a)))
            .collect();
        let tests = runner.map(jobs.len(), |j| {
            let (c, a) = jobs[j];
            let slot = reference.slot_of(knots[c]).expect("checkpoint retained");
            let test_cfg = EnergyTestConfig {
                permutations: m.permutations,
                method: if cfg.family.dim == 1 {
                    EnergyMethod::Exact
                } else {
                    EnergyMethod::Sliced {
                        directions: m.directions,
                    }
                },
                seed: child_seed(seed_alt, c as u64),
            };
            Ok(energy_test(
                &arms[a].1 .0.at_slot(slot),
                &reference.at_slot(slot),
                &test_cfg,
            )?)
        })?;
        for ((c, a), test) in jobs.into_iter().zip(tests) {
            rows.push(MarginalRow {
                trial,
                checkpoint: c,
                t: grid.knots()[knots[c]],
                arm: arms[a].0,
                statistic: test.statistic,
                p_value: test.p_value,
            });
        }
        ensembles.push(EnsembleRun {
            run_id: format!("trial{trial}/reference"),
            elapsed: reference_elapsed,
            seed: seed_ref,
            mode: "ode".into(),
            condition: 0,
            batch: reference,
        });
        for (arm, (batch, elapsed)) in arms {
            ensembles.push(EnsembleRun {
                run_id: format!("trial{trial}/{}", arm.as_str()),
                elapsed,
                seed: seed_alt,
                mode: match arm {
                    MarginalArm::Resample => "ode".into(),
                    _ => "sde".into(),
                },
                condition: 0,
                batch,
            });
        }
    }
    Ok(MarginalResult {
        rows,
        ensembles,
        level: m.level,
        trials: m.trials,
        checkpoint_times: knots.iter().map(|&k| grid.knots()[k]).collect(),
    })
}

/// Plain sampling in the configured mode, one ensemble per (seed, condition).
pub fn sample_runs(cfg: &ExperimentConfig, built: &Built, runner: &Runner) -> Result<Vec<EnsembleRun>> {
    let sampler_cfg = cfg.sampler_config(cfg.sampler.mode)?;
    let mut out = Vec::new();
    for &seed in &cfg.experiment.seeds {
        for (ci, condition) in built.conditions.iter().enumerate() {
            let sampler = sampler_for(&sampler_cfg, built, condition, &Retention::All)?;
            let (batch, elapsed) = runner.timed_ensemble(&sampler, seed, cfg.experiment.particles)?;
            out.push(EnsembleRun {
                run_id: format!("seed{seed}/{}/{}", cfg.conditions[ci].name, cfg.sampler.mode.as_str()),
                elapsed,
                seed,
                mode: cfg.sampler.mode.as_str().into(),
                condition: ci,
                batch,
            });
        }
    }
    Ok(out)
}
