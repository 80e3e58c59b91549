use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Default clamp margin at both ends of the unit interval.
pub const DEFAULT_CLAMP: f64 = 1e-3;

/// Default number of integration steps.
pub const DEFAULT_STEPS: usize = 28;

/// Strictly decreasing integration knots `t_0 > t_1 > ... > t_K` inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
    delta_lo: f64,
    delta_hi: f64,
}

impl TimeGrid {
    /// `steps` uniform steps from `1 - delta_hi` down to `delta_lo`.
    pub fn uniform(steps: usize, delta_lo: f64, delta_hi: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidGrid("at least one step is required".into()));
        }
        let hi = 1.0 - delta_hi;
        if !(delta_lo > 0.0 && delta_hi > 0.0 && delta_lo < hi) {
            return Err(Error::InvalidGrid(format!(
                "clamps must satisfy 0 < delta_lo < 1 - delta_hi, got {delta_lo}, {delta_hi}"
            )));
        }
        let h = (hi - delta_lo) / steps as f64;
        let mut knots: Vec<f64> = (0..steps).map(|k| hi - k as f64 * h).collect();
        knots.push(delta_lo);
        Self::from_knots(knots, delta_lo, delta_hi)
    }

    pub fn default_grid() -> Self {
        Self::uniform(DEFAULT_STEPS, DEFAULT_CLAMP, DEFAULT_CLAMP).expect("default grid is valid")
    }

    pub fn from_knots(knots: Vec<f64>, delta_lo: f64, delta_hi: f64) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::InvalidGrid("need at least two knots".into()));
        }
        if knots.iter().any(|t| !(t.is_finite() && *t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidGrid("knots must lie in (0, 1)".into()));
        }
        if knots.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidGrid("knots must be strictly decreasing".into()));
        }
        Ok(Self {
            knots,
            delta_lo,
            delta_hi,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of integration steps `K` (one less than the number of knots).
    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn delta_lo(&self) -> f64 {
        self.delta_lo
    }

    pub fn delta_hi(&self) -> f64 {
        self.delta_hi
    }

    /// Index of the knot closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, k) in self.knots.iter().enumerate() {
            if libm::fabs(k - t) < libm::fabs(self.knots[best] - t) {
                best = i;
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_endpoints() {
        let g = TimeGrid::default_grid();
        assert_eq!(g.steps(), 28);
        assert_eq!(g.knots()[0], 0.999);
        assert_eq!(*g.knots().last().unwrap(), 0.001);
        assert!(g.knots().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::uniform(0, 1e-3, 1e-3).is_err());
        assert!(TimeGrid::uniform(4, 0.0, 1e-3).is_err());
        assert!(TimeGrid::from_knots(vec![0.5, 0.6], 1e-3, 1e-3).is_err());
        assert!(TimeGrid::from_knots(vec![1.0, 0.5], 1e-3, 1e-3).is_err());
    }

    #[test]
    fn fine_grid_hits_checkpoints() {
        let g = TimeGrid::uniform(998, 1e-3, 1e-3).unwrap();
        for t in [0.8, 0.5, 0.2] {
            let i = g.nearest_index(t);
            assert!((g.knots()[i] - t).abs() < 1e-9);
        }
    }
}
