//! Euler ODE and Euler–Maruyama SDE integration over a downward time grid,
//! and the three-stage pipeline: deterministic steps with an injected
//! velocity, then SDE fission for the remaining steps.
//!
//! The SDE uses drift `v + (sigma_t^2 / 2) * score` with `sigma_t =
//! a * sqrt(t / (1 - t))`. The step runs in the direction of decreasing `t`,
//! and written in that direction the Fokker–Planck balance against the
//! probability-flow ODE gives the `+` sign; see [`SCORE_CORRECTION_SIGN`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::bias::{BoundField, Condition, VelocityModel};
use crate::grid::TimeGrid;
use crate::injection::{inject, residual_from_bound, InjectionConfig};
use crate::linalg::check_dims;
use crate::rng::{fill_standard_normal, stream, Stage};
use crate::{Error, Result};

/// Default noise level `a`.
pub const DEFAULT_NOISE_LEVEL: f64 = 0.7;

/// Sign of the score term in the SDE drift for downward integration.
///
/// Fixed by the ODE/SDE marginal-equivalence experiment: with `+1` the SDE
/// endpoints are indistinguishable from ODE endpoints at every checkpoint,
/// while `-1` fails at every checkpoint. It also follows from writing the
/// Fokker–Planck equation in the reversed time `s = -t`.
pub const SCORE_CORRECTION_SIGN: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub level: f64,
    pub delta_lo: f64,
    pub delta_hi: f64,
}

/// `sigma_t` and whether `t` had to be clamped first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sigma {
    pub value: f64,
    pub clamped: bool,
}

impl NoiseSchedule {
    pub fn new(level: f64, delta_lo: f64, delta_hi: f64) -> Result<Self> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::Config(format!("noise level {level} must be finite and >= 0")));
        }
        if !(delta_lo > 0.0 && delta_hi > 0.0 && delta_lo < 1.0 - delta_hi) {
            return Err(Error::Config("noise clamps must satisfy 0 < lo < 1 - hi".into()));
        }
        Ok(Self {
            level,
            delta_lo,
            delta_hi,
        })
    }

    pub fn with_level(level: f64) -> Result<Self> {
        Self::new(level, crate::grid::DEFAULT_CLAMP, crate::grid::DEFAULT_CLAMP)
    }

    /// `a * sqrt(t / (1 - t))` with `t` clamped to `[delta_lo, 1 - delta_hi]`.
    pub fn sigma(&self, t: f64) -> Sigma {
        let hi = 1.0 - self.delta_hi;
        let tc = t.clamp(self.delta_lo, hi);
        Sigma {
            value: self.level * libm::sqrt(tc / (1.0 - tc)),
            clamped: tc != t,
        }
    }
}

pub fn noise_sigma(schedule: &NoiseSchedule, t: f64) -> Sigma {
    schedule.sigma(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Ode,
    Sde,
    InjectFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    /// Analytic score of the teacher's effective mixture.
    Analytic,
    /// `((1 - t) v - x) / t` from the teacher velocity.
    VelocityApprox,
}

/// Form of the SDE drift; only [`DriftCorrection::Score`] preserves marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftCorrection {
    Score,
    /// Score term dropped: plain velocity plus noise.
    Dropped,
    /// Score term with the opposite sign.
    Flipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub mode: Mode,
    pub grid: TimeGrid,
    pub schedule: Option<NoiseSchedule>,
    pub injection: Option<InjectionConfig>,
    pub score_source: ScoreSource,
    pub drift: DriftCorrection,
}

impl SamplerConfig {
    pub fn ode(grid: TimeGrid) -> Self {
        Self {
            mode: Mode::Ode,
            grid,
            schedule: None,
            injection: None,
            score_source: ScoreSource::VelocityApprox,
            drift: DriftCorrection::Score,
        }
    }

    pub fn sde(grid: TimeGrid, schedule: NoiseSchedule, score_source: ScoreSource) -> Self {
        Self {
            mode: Mode::Sde,
            grid,
            schedule: Some(schedule),
            injection: None,
            score_source,
            drift: DriftCorrection::Score,
        }
    }

    pub fn injectflow(grid: TimeGrid, schedule: NoiseSchedule, injection: InjectionConfig) -> Self {
        Self {
            mode: Mode::InjectFlow,
            grid,
            schedule: Some(schedule),
            injection: Some(injection),
            score_source: ScoreSource::VelocityApprox,
            drift: DriftCorrection::Score,
        }
    }

    pub fn validate(&self, has_student: bool) -> Result<()> {
        match self.mode {
            Mode::Ode => Ok(()),
            Mode::Sde => self
                .schedule
                .map(|_| ())
                .ok_or_else(|| Error::Config("sde mode requires a noise schedule".into())),
            Mode::InjectFlow => {
                if self.schedule.is_none() {
                    return Err(Error::Config("injectflow mode requires a noise schedule".into()));
                }
                let inj = self
                    .injection
                    .as_ref()
                    .ok_or_else(|| Error::Config("injectflow mode requires an injection config".into()))?;
                inj.validate(self.grid.steps())?;
                if !has_student {
                    return Err(Error::Config("injectflow mode requires a student model".into()));
                }
                Ok(())
            }
        }
    }

    /// First step index that uses the SDE; `None` for pure ODE sampling.
    fn fission_start(&self) -> Option<usize> {
        match self.mode {
            Mode::Ode => None,
            Mode::Sde => Some(0),
            Mode::InjectFlow => self
                .injection
                .as_ref()
                .and_then(|i| i.inject_steps.iter().next_back())
                .map(|last| last + 1),
        }
    }
}

fn check_step(t: f64, t_next: f64) -> Result<f64> {
    if !(t > t_next) {
        return Err(Error::NonDecreasingTime { t, t_next });
    }
    Ok(t - t_next)
}

/// Euler step toward data: `x + (t - t_next) v`.
pub fn ode_step(x: &[f64], t: f64, t_next: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_dims(x, v)?;
    let dt = check_step(t, t_next)?;
    Ok(x.iter().zip(v).map(|(xi, vi)| xi + dt * vi).collect())
}

/// Score recovered from the velocity under the straight Gaussian path:
/// substitute `x_data ~ x + t v` into `((1 - t) x_data - x) / t^2`.
pub fn score_from_velocity(x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    check_dims(x, v)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
    }
    Ok(x.iter().zip(v).map(|(xi, vi)| ((1.0 - t) * vi - xi) / t).collect())
}

/// `v + sign * (sigma^2 / 2) * score`.
pub fn sde_drift(v: &[f64], sigma: f64, score: &[f64]) -> Result<Vec<f64>> {
    sde_drift_with(v, sigma, score, DriftCorrection::Score)
}

pub fn sde_drift_with(v: &[f64], sigma: f64, score: &[f64], correction: DriftCorrection) -> Result<Vec<f64>> {
    check_dims(v, score)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config("sigma must be >= 0".into()));
    }
    let mut out = v.to_vec();
    add_correction(&mut out, sigma, score, correction);
    Ok(out)
}

fn add_correction(drift: &mut [f64], sigma: f64, score: &[f64], correction: DriftCorrection) {
    let sign = match correction {
        DriftCorrection::Score => SCORE_CORRECTION_SIGN,
        DriftCorrection::Flipped => -SCORE_CORRECTION_SIGN,
        DriftCorrection::Dropped => return,
    };
    let half = 0.5 * sigma * sigma;
    if half == 0.0 {
        return;
    }
    for (d, s) in drift.iter_mut().zip(score) {
        *d += sign * half * s;
    }
}

/// Euler–Maruyama: `x + dt * drift + sigma * sqrt(dt) * xi`, `dt = t - t_next`.
pub fn sde_step<R: Rng + ?Sized>(
    x: &[f64],
    t: f64,
    t_next: f64,
    drift: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(x, drift)?;
    let dt = check_step(t, t_next)?;
    let mut xi = vec![0.0; x.len()];
    fill_standard_normal(rng, &mut xi);
    let mut out = x.to_vec();
    em_update(&mut out, dt, drift, sigma, &xi);
    Ok(out)
}

#[inline]
fn euler_update(x: &mut [f64], dt: f64, v: &[f64]) {
    for (xi, vi) in x.iter_mut().zip(v) {
        *xi += dt * vi;
    }
}

#[inline]
fn em_update(x: &mut [f64], dt: f64, drift: &[f64], sigma: f64, xi: &[f64]) {
    let scale = sigma * libm::sqrt(dt);
    if scale == 0.0 {
        return euler_update(x, dt, drift);
    }
    for ((x, d), n) in x.iter_mut().zip(drift).zip(xi) {
        *x = *x + dt * d + scale * n;
    }
}

/// Which grid knots to keep in a [`TrajectoryBatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Retention {
    All,
    /// Knot indices, kept in increasing order.
    Knots(BTreeSet<usize>),
}

impl Retention {
    fn indices(&self, knots: usize) -> Vec<usize> {
        match self {
            Retention::All => (0..knots).collect(),
            Retention::Knots(k) => k.iter().copied().filter(|&i| i < knots).collect(),
        }
    }
}

/// Retained states of one particle, knot-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRun {
    pub states: Vec<f64>,
    pub clamps: usize,
}

/// Sampler with the teacher (and student) bound to one condition.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    teacher: BoundField,
    student: Option<BoundField>,
    retained: Vec<usize>,
}

impl Sampler {
    pub fn new(
        config: &SamplerConfig,
        teacher: &VelocityModel,
        student: Option<&VelocityModel>,
        c: &Condition,
        retention: &Retention,
    ) -> Result<Self> {
        config.validate(student.is_some())?;
        let teacher_field = teacher.bind(c)?;
        let student_field = match (config.mode, student) {
            (Mode::InjectFlow, Some(s)) => {
                let masked = c.masked(&config.injection.as_ref().expect("validated").masked_token_ids);
                if s.dim() != teacher.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: teacher.dim(),
                        found: s.dim(),
                    });
                }
                Some(s.bind(&masked)?)
            }
            _ => None,
        };
        let retained = retention.indices(config.grid.knots().len());
        Ok(Self {
            config: config.clone(),
            teacher: teacher_field,
            student: student_field,
            retained,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.teacher.dim()
    }

    pub fn retained_knots(&self) -> &[usize] {
        &self.retained
    }

    pub fn teacher_field(&self) -> &BoundField {
        &self.teacher
    }

    /// Initial state of particle `index`: standard normal from its init stream.
    pub fn initial_state(&self, master_seed: u64, index: u64) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        fill_standard_normal(&mut stream(master_seed, index, Stage::Init), &mut x);
        x
    }

    pub fn run_particle(&self, master_seed: u64, index: u64) -> Result<ParticleRun> {
        let x0 = self.initial_state(master_seed, index);
        self.run_particle_from(x0, master_seed, index)
    }

    /// Integrates one particle from `x` at the top knot. Stochastic draws come
    /// from the particle's own streams, so the result depends only on
    /// `(x, master_seed, index)`.
    pub fn run_particle_from(&self, mut x: Vec<f64>, master_seed: u64, index: u64) -> Result<ParticleRun> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
        let knots = self.config.grid.knots();
        let fission = self.config.fission_start();
        let inject_cfg = self.config.injection.as_ref();
        let mut sde_rng = stream(master_seed, index, Stage::Sde);
        let mut teacher_rng = stream(master_seed, index, Stage::Teacher);
        let mut student_rng = stream(master_seed, index, Stage::Student);

        let mut v = vec![0.0; d];
        let mut score = vec![0.0; d];
        let mut xi = vec![0.0; d];
        let mut scratch = Vec::new();
        let mut states = Vec::with_capacity(self.retained.len() * d);
        let mut clamps = 0;
        let mut next_keep = 0;

        for k in 0..knots.len() {
            if self.retained.get(next_keep) == Some(&k) {
                states.extend_from_slice(&x);
                next_keep += 1;
            }
            if k + 1 == knots.len() {
                break;
            }
            let (t, t_next) = (knots[k], knots[k + 1]);
            let dt = t - t_next;
            let injecting =
                self.config.mode == Mode::InjectFlow && inject_cfg.is_some_and(|c| c.inject_steps.contains(&k));
            let stochastic = !injecting && fission.is_some_and(|f| k >= f);
            let want_analytic = stochastic && self.config.score_source == ScoreSource::Analytic;

            self.teacher.velocity_into(
                &x,
                t,
                &mut v,
                if want_analytic { Some(&mut score) } else { None },
                &mut scratch,
                &mut teacher_rng,
            )?;

            if injecting {
                let cfg = inject_cfg.expect("checked above");
                let student = self.student.as_ref().expect("validated");
                let v_perp = residual_from_bound(&v, student, &x, t, cfg.proj_eps, &mut student_rng)?;
                let v_new = inject(&v, &v_perp, cfg.alpha)?;
                euler_update(&mut x, dt, &v_new);
            } else if stochastic {
                let schedule = self.config.schedule.as_ref().expect("validated");
                let sigma = schedule.sigma(t);
                if sigma.clamped {
                    clamps += 1;
                }
                if !want_analytic {
                    for j in 0..d {
                        score[j] = ((1.0 - t) * v[j] - x[j]) / t;
                    }
                }
                add_correction(&mut v, sigma.value, &score, self.config.drift);
                fill_standard_normal(&mut sde_rng, &mut xi);
                em_update(&mut x, dt, &v, sigma.value, &xi);
            } else {
                euler_update(&mut x, dt, &v);
            }
            if x.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("particle state"));
            }
        }
        Ok(ParticleRun { states, clamps })
    }
}

/// States of `N` particles at the retained knots of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    dim: usize,
    grid: TimeGrid,
    knots: Vec<usize>,
    particles: usize,
    states: Vec<f64>,
    master_seed: u64,
    clamps_applied: usize,
}

impl TrajectoryBatch {
    /// Assemble from per-particle runs ordered by particle index.
    pub fn from_runs(sampler: &Sampler, master_seed: u64, runs: Vec<ParticleRun>) -> Self {
        let particles = runs.len();
        let mut states = Vec::with_capacity(particles * sampler.retained.len() * sampler.dim());
        let mut clamps_applied = 0;
        for r in runs {
            states.extend_from_slice(&r.states);
            clamps_applied += r.clamps;
        }
        Self {
            dim: sampler.dim(),
            grid: sampler.config.grid.clone(),
            knots: sampler.retained.clone(),
            particles,
            states,
            master_seed,
            clamps_applied,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Grid indices of the retained knots.
    pub fn knots(&self) -> &[usize] {
        &self.knots
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Stream index of each particle (equal to its position in the batch).
    pub fn stream_ids(&self) -> Vec<u64> {
        (0..self.particles as u64).collect()
    }

    pub fn clamps_applied(&self) -> usize {
        self.clamps_applied
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }

    /// State of `particle` at retained slot `slot`.
    pub fn state(&self, particle: usize, slot: usize) -> &[f64] {
        let per = self.knots.len() * self.dim;
        let start = particle * per + slot * self.dim;
        &self.states[start..start + self.dim]
    }

    /// Slot of grid knot `knot`, if retained.
    pub fn slot_of(&self, knot: usize) -> Option<usize> {
        self.knots.iter().position(|&k| k == knot)
    }

    /// All particles at retained slot `slot`.
    pub fn at_slot(&self, slot: usize) -> Vec<&[f64]> {
        (0..self.particles).map(|p| self.state(p, slot)).collect()
    }

    pub fn endpoints(&self) -> Vec<&[f64]> {
        self.at_slot(self.knots.len() - 1)
    }
}

pub fn sample(
    config: &SamplerConfig,
    teacher: &VelocityModel,
    student: Option<&VelocityModel>,
    c: &Condition,
    particles: usize,
    master_seed: u64,
) -> Result<TrajectoryBatch> {
    sample_retaining(config, teacher, student, c, particles, master_seed, &Retention::All)
}

pub fn sample_retaining(
    config: &SamplerConfig,
    teacher: &VelocityModel,
    student: Option<&VelocityModel>,
    c: &Condition,
    particles: usize,
    master_seed: u64,
    retention: &Retention,
) -> Result<TrajectoryBatch> {
    let sampler = Sampler::new(config, teacher, student, c, retention)?;
    let runs = (0..particles as u64)
        .map(|i| sampler.run_particle(master_seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch::from_runs(&sampler, master_seed, runs))
}

/// Sampling from caller-supplied initial states instead of the init streams.
pub fn sample_from_initial(
    config: &SamplerConfig,
    teacher: &VelocityModel,
    student: Option<&VelocityModel>,
    c: &Condition,
    initial: &[Vec<f64>],
    master_seed: u64,
) -> Result<TrajectoryBatch> {
    let sampler = Sampler::new(config, teacher, student, c, &Retention::All)?;
    let runs = initial
        .iter()
        .enumerate()
        .map(|(i, x0)| sampler.run_particle_from(x0.clone(), master_seed, i as u64))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch::from_runs(&sampler, master_seed, runs))
}
