//! Closed-form flow-matching quantities for diagonal Gaussian mixtures.
//!
//! Under the straight path `x_t = (1 - t) x1 + t eps` with `x1 ~ N(mu, S)` and
//! `eps ~ N(0, I)`, the pair `(x1, x_t)` is jointly Gaussian per dimension:
//!
//! ```text
//! A      = (1 - t)^2 S + t^2            Var[x_t]
//! Cov(x1, x_t)  = (1 - t) S
//! Cov(eps, x_t) = t
//! ```
//!
//! Conditioning gives, with `u = x - (1 - t) mu`,
//!
//! ```text
//! E[x1 - eps | x_t = x] = mu + ((1 - t) S - t) / A * u
//! grad log p_t(x)       = -u / A
//! ```
//!
//! For a mixture both are averaged with the posterior responsibilities of the
//! components given `x_t = x`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::linalg::log_sum_exp;
use crate::rng::{fill_standard_normal, standard_normal};
use crate::{Error, Result};

/// Variances below this are treated as point masses; such mixtures have no
/// density at `t = 0`.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::InvalidMixture("component dimension must be at least 1".into()));
        }
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                found: var.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("component mean"));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidMixture("variances must be finite and positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn min_var(&self) -> f64 {
        self.var.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `ln N(x; (1 - t) mu, A)`.
    fn log_marginal_pdf(&self, x: &[f64], t: f64) -> f64 {
        let s = 1.0 - t;
        let mut acc = 0.0;
        for ((xj, mj), vj) in x.iter().zip(&self.mean).zip(&self.var) {
            let a = s * s * vj + t * t;
            let u = xj - s * mj;
            acc += libm::log(a) + u * u / a;
        }
        -0.5 * (acc + self.mean.len() as f64 * LN_2PI)
    }
}

/// Finite mixture of diagonal Gaussians; the data distribution of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

/// One draw of the path: the data point, the noise and their interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub x_t: Vec<f64>,
    pub x1: Vec<f64>,
    pub eps: Vec<f64>,
}

impl GaussianMixture {
    /// Weights must be nonnegative and sum to one within `1e-12`.
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture("at least one component is required".into()));
        }
        if components.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                found: weights.len(),
            });
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: c.dim(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidMixture("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if libm::fabs(total - 1.0) > 1e-12 {
            return Err(Error::InvalidMixture(format!("weights sum to {total}, not 1")));
        }
        let log_weights = weights.iter().map(|w| libm::log(*w)).collect();
        Ok(Self {
            components,
            weights,
            log_weights,
        })
    }

    /// Like [`GaussianMixture::new`] but rescales positive raw weights to sum to one.
    pub fn normalized(components: Vec<GaussianComponent>, raw_weights: Vec<f64>) -> Result<Self> {
        let total: f64 = raw_weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidMixture(
                "raw weights must have a positive finite sum".into(),
            ));
        }
        let weights = raw_weights.iter().map(|w| w / total).collect();
        Self::new(components, weights)
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self::new(vec![component], vec![1.0]).expect("single component is a valid mixture")
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Mixture mean `E[x1]`.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (c, w) in self.components.iter().zip(&self.weights) {
            for (mj, cj) in m.iter_mut().zip(c.mean()) {
                *mj += w * cj;
            }
        }
        m
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Accepts `t` in `[0, 1]`, rejecting `t = 0` for point-mass components.
    fn check_density_time(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
        }
        if t == 0.0 && self.components.iter().any(|c| c.min_var() < VARIANCE_FLOOR) {
            return Err(Error::DegenerateDensity { floor: VARIANCE_FLOOR });
        }
        Ok(())
    }

    /// Writes `ln w_i + ln N_i(x)` into `logits` and returns `ln p_t(x)`.
    fn logits_into(&self, x: &[f64], t: f64, logits: &mut Vec<f64>) -> f64 {
        logits.clear();
        logits.extend(
            self.components
                .iter()
                .zip(&self.log_weights)
                .map(|(c, lw)| lw + c.log_marginal_pdf(x, t)),
        );
        log_sum_exp(logits)
    }

    /// Draws `x1` from the mixture, `eps ~ N(0, I)` and returns both with
    /// `x_t = (1 - t) x1 + t eps`.
    pub fn path_sample<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<PathSample> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
        }
        let x1 = self.sample_data(rng);
        let mut eps = vec![0.0; self.dim()];
        fill_standard_normal(rng, &mut eps);
        let x_t = if t == 0.0 {
            x1.clone()
        } else if t == 1.0 {
            eps.clone()
        } else {
            x1.iter().zip(&eps).map(|(a, e)| (1.0 - t) * a + t * e).collect()
        };
        Ok(PathSample { x_t, x1, eps })
    }

    /// One draw from the data distribution.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.components[idx];
        c.mean()
            .iter()
            .zip(c.var())
            .map(|(m, v)| m + libm::sqrt(*v) * standard_normal(rng))
            .collect()
    }

    /// `ln p_t(x)`, with `p_t = sum_i w_i N(x; (1 - t) mu_i, A_i)`.
    pub fn log_marginal_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        self.check_density_time(t)?;
        let mut logits = Vec::with_capacity(self.len());
        Ok(self.logits_into(x, t, &mut logits))
    }

    pub fn marginal_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.log_marginal_density(x, t).map(libm::exp)
    }

    /// Posterior probabilities of the components given `x_t = x`.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_density_time(t)?;
        let mut logits = Vec::with_capacity(self.len());
        let lp = self.logits_into(x, t, &mut logits);
        Ok(logits.iter().map(|l| libm::exp(l - lp)).collect())
    }

    /// Unnormalized log posteriors `ln w_i + ln p_{t,i}(x)`; unlike
    /// [`Self::responsibilities`] these do not underflow far from all components.
    pub fn component_log_posteriors(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_density_time(t)?;
        let mut logits = Vec::with_capacity(self.len());
        self.logits_into(x, t, &mut logits);
        Ok(logits)
    }

    /// Marginal velocity `E[x1 - eps | x_t = x]`, defined for `t` in `(0, 1)`.
    pub fn marginal_velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim()];
        let mut scratch = Vec::with_capacity(self.len());
        self.velocity_into(x, t, &mut v, None, &mut scratch)?;
        Ok(v)
    }

    /// `grad_x ln p_t(x)`, defined for `t` in `(0, 1]`.
    pub fn marginal_score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_density_time(t)?;
        let mut logits = Vec::with_capacity(self.len());
        let lp = self.logits_into(x, t, &mut logits);
        let s = 1.0 - t;
        let mut score = vec![0.0; self.dim()];
        for (c, l) in self.components.iter().zip(&logits) {
            let g = libm::exp(l - lp);
            if g == 0.0 {
                continue;
            }
            for (j, out) in score.iter_mut().enumerate() {
                let a = s * s * c.var[j] + t * t;
                *out -= g * (x[j] - s * c.mean[j]) / a;
            }
        }
        Ok(score)
    }

    /// Velocity and (optionally) score in one pass over the components.
    ///
    /// `scratch` is reused between calls to avoid allocating in sampling loops.
    pub fn velocity_into(
        &self,
        x: &[f64],
        t: f64,
        velocity: &mut [f64],
        mut score: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        self.check_point(x)?;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
        }
        if velocity.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                found: velocity.len(),
            });
        }
        if let Some(s) = score.as_deref() {
            if s.len() != x.len() {
                return Err(Error::DimensionMismatch {
                    expected: x.len(),
                    found: s.len(),
                });
            }
        }
        let lp = self.logits_into(x, t, scratch);
        velocity.fill(0.0);
        if let Some(s) = score.as_deref_mut() {
            s.fill(0.0);
        }
        let s = 1.0 - t;
        for (c, l) in self.components.iter().zip(scratch.iter()) {
            let g = libm::exp(l - lp);
            if g == 0.0 {
                continue;
            }
            for j in 0..x.len() {
                let var = c.var[j];
                let a = s * s * var + t * t;
                let u = x[j] - s * c.mean[j];
                velocity[j] += g * (c.mean[j] + (s * var - t) / a * u);
                if let Some(sc) = score.as_deref_mut() {
                    sc[j] -= g * u / a;
                }
            }
        }
        Ok(())
    }

    /// Contribution `gamma_i v_i` of a single component to the marginal velocity.
    pub fn component_velocity_contribution(&self, index: usize, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if index >= self.len() {
            return Err(Error::WrongCount {
                expected: self.len(),
                found: index,
            });
        }
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
        }
        let gamma = self.responsibilities(x, t)?[index];
        let c = &self.components[index];
        let s = 1.0 - t;
        Ok((0..x.len())
            .map(|j| {
                let a = s * s * c.var[j] + t * t;
                gamma * (c.mean[j] + (s * c.var[j] - t) / a * (x[j] - s * c.mean[j]))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};

    fn pair_1d(w: f64) -> GaussianMixture {
        GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(vec![-2.0], 0.5).unwrap(),
                GaussianComponent::isotropic(vec![3.0], 0.25).unwrap(),
            ],
            vec![1.0 - w, w],
        )
        .unwrap()
    }

    #[test]
    fn path_boundaries() {
        let m = pair_1d(0.3);
        let mut rng = stream(1, 0, Stage::Path);
        let s0 = m.path_sample(0.0, &mut rng).unwrap();
        assert_eq!(s0.x_t, s0.x1);
        let s1 = m.path_sample(1.0, &mut rng).unwrap();
        assert_eq!(s1.x_t, s1.eps);
    }

    #[test]
    fn path_of_near_delta() {
        let m = GaussianMixture::single(GaussianComponent::isotropic(vec![4.0, -2.0], 1e-12).unwrap());
        let mut rng = stream(5, 0, Stage::Path);
        let s = m.path_sample(0.5, &mut rng).unwrap();
        for j in 0..2 {
            let expect = 0.5 * m.components()[0].mean()[j] + 0.5 * s.eps[j];
            assert!((s.x_t[j] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn density_at_unit_time_is_standard_normal() {
        let m = pair_1d(0.3);
        for x in [-1.5, 0.0, 0.7] {
            let p = m.marginal_density(&[x], 1.0).unwrap();
            let phi = (-0.5 * x * x).exp() / (2.0 * core::f64::consts::PI).sqrt();
            assert!((p - phi).abs() < 1e-15);
        }
    }

    #[test]
    fn density_single_component_substitution() {
        // mu = 2, S = 1, t = 0.5: N(x; 1, 0.25 + 0.25)
        let m = GaussianMixture::single(GaussianComponent::isotropic(vec![2.0], 1.0).unwrap());
        let x = 0.4;
        let p = m.marginal_density(&[x], 0.5).unwrap();
        let var = 0.5;
        let expect = (-(x - 1.0) * (x - 1.0) / (2.0 * var)).exp() / (2.0 * core::f64::consts::PI * var).sqrt();
        assert!((p - expect).abs() < 1e-14);
    }

    #[test]
    fn degenerate_density_at_zero() {
        let m = GaussianMixture::single(GaussianComponent::isotropic(vec![0.0], 1e-13).unwrap());
        assert!(matches!(
            m.marginal_density(&[0.0], 0.0),
            Err(Error::DegenerateDensity { .. })
        ));
        assert!(matches!(
            m.marginal_score(&[0.0], 0.0),
            Err(Error::DegenerateDensity { .. })
        ));
        let ok = pair_1d(0.5);
        assert!(ok.marginal_density(&[0.0], 0.0).is_ok());
    }

    #[test]
    fn velocity_rejects_closed_endpoints() {
        let m = pair_1d(0.5);
        assert!(m.marginal_velocity(&[0.0], 0.0).is_err());
        assert!(m.marginal_velocity(&[0.0], 1.0).is_err());
        assert!(m.marginal_velocity(&[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn velocity_of_near_delta_points_at_mean() {
        let mu = [1.5, -0.5];
        let m = GaussianMixture::single(GaussianComponent::isotropic(mu.to_vec(), 1e-12).unwrap());
        let x = [0.2, 0.9];
        let t = 0.4;
        let v = m.marginal_velocity(&x, t).unwrap();
        for j in 0..2 {
            assert!((v[j] - (mu[j] - x[j]) / t).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_mixture_has_zero_velocity_at_origin() {
        let m = GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(vec![-2.0, 1.0], 0.3).unwrap(),
                GaussianComponent::isotropic(vec![2.0, -1.0], 0.3).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let v = m.marginal_velocity(&[0.0, 0.0], 0.37).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn score_at_unit_time_is_minus_x() {
        let m = pair_1d(0.2);
        let s = m.marginal_score(&[0.8], 1.0).unwrap();
        assert!((s[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn score_of_near_delta() {
        let mu = [2.0];
        let m = GaussianMixture::single(GaussianComponent::isotropic(mu.to_vec(), 1e-12).unwrap());
        let (x, t) = (0.3, 0.6);
        let s = m.marginal_score(&[x], t).unwrap();
        let expect = ((1.0 - t) * mu[0] - x) / (t * t);
        assert!((s[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn responsibilities_basic_cases() {
        let single = GaussianMixture::single(GaussianComponent::isotropic(vec![1.0], 1.0).unwrap());
        assert_eq!(single.responsibilities(&[3.0], 0.5).unwrap(), vec![1.0]);

        let sym = GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(vec![-1.0], 0.2).unwrap(),
                GaussianComponent::isotropic(vec![1.0], 0.2).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let g = sym.responsibilities(&[0.0], 0.3).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn responsibility_of_far_separated_component() {
        // components 20 sigma apart; x at the marginal mean of component 1
        let t = 0.1;
        let m = GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(vec![0.0], 0.01).unwrap(),
                GaussianComponent::isotropic(vec![2.0], 0.01).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let x = [(1.0 - t) * 2.0];
        let g = m.responsibilities(&x, t).unwrap();
        // density-ratio cross-check
        let d0 = m.components()[0].log_marginal_pdf(&x, t);
        let d1 = m.components()[1].log_marginal_pdf(&x, t);
        let ratio = 1.0 / (1.0 + (d0 - d1).exp());
        assert!(g[1] > 0.999);
        assert!((g[1] - ratio).abs() < 1e-15);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = GaussianComponent::isotropic(vec![0.0], 1.0).unwrap();
        assert!(GaussianMixture::new(vec![c.clone(), c.clone()], vec![0.5, 0.6]).is_err());
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
        assert!(GaussianMixture::normalized(vec![c.clone(), c], vec![1.0, 3.0]).is_ok());
        assert!(GaussianComponent::isotropic(vec![0.0], 0.0).is_err());
    }

    #[test]
    fn velocity_into_matches_separate_calls() {
        let m = pair_1d(0.35);
        let (x, t) = ([0.45], 0.42);
        let mut v = [0.0];
        let mut s = [0.0];
        let mut scratch = Vec::new();
        m.velocity_into(&x, t, &mut v, Some(&mut s), &mut scratch).unwrap();
        assert_eq!(v.to_vec(), m.marginal_velocity(&x, t).unwrap());
        assert!((s[0] - m.marginal_score(&x, t).unwrap()[0]).abs() < 1e-15);
    }
}
