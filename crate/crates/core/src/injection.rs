//! Orthogonal residual extraction and velocity injection.
//!
//! The student's velocity under a masked condition is projected onto the
//! orthogonal complement of the teacher's velocity; the remainder carries only
//! directions the teacher does not already move along. Injecting it widens the
//! span of the update from `{v_T}` to `{v_T, v_perp}`.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::Rng;

use crate::bias::{BoundField, Condition, TokenId, VelocityModel};
use crate::linalg::{check_dims, dot};
use crate::{Error, Result};

/// Default regularizer of the projection denominator.
pub const DEFAULT_PROJ_EPS: f64 = 1e-8;

/// Default injection scale.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Teacher norms at or below this need a positive regularizer.
pub const MIN_TEACHER_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub proj_eps: f64,
    /// Zero-based grid step indices at which the injected velocity is used.
    pub inject_steps: BTreeSet<usize>,
    /// Tokens hidden from the student.
    pub masked_token_ids: Vec<TokenId>,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            proj_eps: DEFAULT_PROJ_EPS,
            inject_steps: [0].into_iter().collect(),
            masked_token_ids: Vec::new(),
        }
    }
}

impl InjectionConfig {
    /// Inject only at the 1-based `start_step`.
    pub fn at_start_step(start_step: usize) -> Result<Self> {
        if start_step == 0 {
            return Err(Error::Config("start_step is 1-based".into()));
        }
        Ok(Self {
            inject_steps: [start_step - 1].into_iter().collect(),
            ..Self::default()
        })
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if !(self.proj_eps.is_finite() && self.proj_eps >= 0.0) {
            return Err(Error::Config("projection epsilon must be finite and >= 0".into()));
        }
        if self.inject_steps.is_empty() {
            return Err(Error::Config("at least one injection step is required".into()));
        }
        if let Some(&last) = self.inject_steps.iter().next_back() {
            if last >= steps {
                return Err(Error::Config(alloc::format!(
                    "injection step {last} is beyond the {steps}-step grid"
                )));
            }
        }
        Ok(())
    }
}

/// `v_S - <v_S, v_T> / (|v_T|^2 + eps) * v_T`.
pub fn orthogonal_project(v_s: &[f64], v_t: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_dims(v_s, v_t)?;
    if !(eps >= 0.0) {
        return Err(Error::Config("projection epsilon must be >= 0".into()));
    }
    let nt2 = dot(v_t, v_t);
    if eps == 0.0 && libm::sqrt(nt2) <= MIN_TEACHER_NORM {
        return Err(Error::DegenerateTeacher { norm: libm::sqrt(nt2) });
    }
    let coef = dot(v_s, v_t) / (nt2 + eps);
    Ok(v_s.iter().zip(v_t).map(|(s, t)| s - coef * t).collect())
}

/// `v_T + alpha * v_perp`.
pub fn inject(v_t: &[f64], v_perp: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_dims(v_t, v_perp)?;
    Ok(v_t.iter().zip(v_perp).map(|(t, p)| t + alpha * p).collect())
}

/// Teacher velocity and the student's residual orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub v_teacher: Vec<f64>,
    pub v_perp: Vec<f64>,
}

/// Teacher on the full condition, student on the condition with
/// `cfg.masked_token_ids` hidden, then the orthogonal projection.
#[allow(clippy::too_many_arguments)]
pub fn extract_residual<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    teacher: &VelocityModel,
    student: &VelocityModel,
    x: &[f64],
    t: f64,
    c: &Condition,
    cfg: &InjectionConfig,
    teacher_rng: &mut R1,
    student_rng: &mut R2,
) -> Result<Residual> {
    let v_teacher = teacher.evaluate(x, t, c, teacher_rng)?;
    let masked = c.masked(&cfg.masked_token_ids);
    let v_student = student.evaluate(x, t, &masked, student_rng)?;
    let v_perp = orthogonal_project(&v_student, &v_teacher, cfg.proj_eps)?;
    Ok(Residual { v_teacher, v_perp })
}

/// [`extract_residual`] for already-bound fields; the teacher velocity is
/// passed in since the sampler has computed it anyway.
pub fn residual_from_bound<R: Rng + ?Sized>(
    v_teacher: &[f64],
    student: &BoundField,
    x: &[f64],
    t: f64,
    proj_eps: f64,
    student_rng: &mut R,
) -> Result<Vec<f64>> {
    let v_student = student.velocity(x, t, student_rng)?;
    orthogonal_project(&v_student, v_teacher, proj_eps)
}
