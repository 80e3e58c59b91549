//! Latent volume, effective rank, endpoint scoring and two-sample tests.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::grid::DEFAULT_CLAMP;
use crate::linalg::{dot, singular_values};
use crate::mixture::GaussianMixture;
use crate::rng::{fill_standard_normal, stream, Stage};
use crate::sampler::TrajectoryBatch;
use crate::{Error, Result};

/// Number of trajectories spanning the volume parallelotope.
pub const VOLUME_PARTICLES: usize = 8;

/// Singular values below this make the log-volume `-inf`.
pub const SINGULAR_UNDERFLOW: f64 = 1e-300;

/// Minimum number of label permutations in [`energy_test`].
pub const MIN_PERMUTATIONS: usize = 200;

fn check_set<S: AsRef<[f64]>>(set: &[S], dim: usize) -> Result<()> {
    for s in set {
        if s.as_ref().len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: s.as_ref().len(),
            });
        }
    }
    Ok(())
}

/// Natural log of the volume of the parallelotope spanned by the first seven
/// states relative to the eighth, `ln sqrt(det(V V^T))`.
///
/// Computed as the sum of log singular values of `V`, so it stays finite long
/// after `det(V V^T)` itself underflows.
pub fn gram_log_volume<S: AsRef<[f64]>>(states: &[S]) -> Result<f64> {
    if states.len() != VOLUME_PARTICLES {
        return Err(Error::WrongCount {
            expected: VOLUME_PARTICLES,
            found: states.len(),
        });
    }
    let d = states[0].as_ref().len();
    check_set(states, d)?;
    let rows = VOLUME_PARTICLES - 1;
    if d < rows {
        return Err(Error::Config(format!("volume needs dimension >= {rows}, got {d}")));
    }
    let origin = states[rows].as_ref();
    let mut v = Vec::with_capacity(rows * d);
    for s in &states[..rows] {
        v.extend(s.as_ref().iter().zip(origin).map(|(a, o)| a - o));
    }
    let sv = singular_values(&v, rows, d)?;
    if sv.iter().any(|s| *s < SINGULAR_UNDERFLOW) {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(sv.iter().map(|s| libm::log(*s)).sum())
}

/// Log-volume at every retained knot of an 8-particle batch.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTrace {
    pub times: Vec<f64>,
    pub log_volume: Vec<f64>,
}

impl VolumeTrace {
    /// Step `k` with the largest decrease `log_volume[k] - log_volume[k + 1]`.
    /// A drop from a finite value to `-inf` counts as infinite; ties go to the
    /// earliest step.
    pub fn largest_drop_step(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, w) in self.log_volume.windows(2).enumerate() {
            let drop = if w[0] == f64::NEG_INFINITY { 0.0 } else { w[0] - w[1] };
            if best.is_none_or(|(_, b)| drop > b) {
                best = Some((k, drop));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn collapsed(&self) -> bool {
        match (self.log_volume.first(), self.log_volume.last()) {
            (Some(a), Some(b)) => b < a,
            _ => false,
        }
    }
}

pub fn volume_trace(batch: &TrajectoryBatch) -> Result<VolumeTrace> {
    if batch.particles() != VOLUME_PARTICLES {
        return Err(Error::WrongCount {
            expected: VOLUME_PARTICLES,
            found: batch.particles(),
        });
    }
    let knots = batch.grid().knots();
    let mut times = Vec::with_capacity(batch.knots().len());
    let mut log_volume = Vec::with_capacity(batch.knots().len());
    for (slot, &k) in batch.knots().iter().enumerate() {
        times.push(knots[k]);
        log_volume.push(gram_log_volume(&batch.at_slot(slot))?);
    }
    Ok(VolumeTrace { times, log_volume })
}

/// Number of singular values of the stacked vectors above `tol` times the
/// largest one; zero for an all-zero stack.
pub fn effective_rank<S: AsRef<[f64]>>(vectors: &[S], tol: f64) -> Result<usize> {
    if vectors.is_empty() {
        return Ok(0);
    }
    let d = vectors[0].as_ref().len();
    check_set(vectors, d)?;
    let data: Vec<f64> = vectors.iter().flat_map(|v| v.as_ref().iter().copied()).collect();
    let sv = singular_values(&data, vectors.len(), d)?;
    let max = sv.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Ok(0);
    }
    Ok(sv.iter().filter(|s| **s > tol * max).count())
}

/// Component with the largest posterior at the smallest grid time.
pub fn mode_assignment(mixture: &GaussianMixture, x: &[f64]) -> Result<usize> {
    mode_assignment_at(mixture, x, DEFAULT_CLAMP)
}

/// Component with the largest posterior at time `t`; ties go to the lowest index.
pub fn mode_assignment_at(mixture: &GaussianMixture, x: &[f64], t: f64) -> Result<usize> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let logits = mixture.component_log_posteriors(x, t)?;
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Identity of one benchmark cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub condition: usize,
    pub seed: u64,
    pub particle: u64,
}

/// Scored endpoint of one cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellOutcome {
    pub key: CellKey,
    pub assigned: usize,
    pub targets: Vec<usize>,
}

impl CellOutcome {
    /// Assigns `endpoint` to a component of `reference` and records the targets.
    pub fn score(key: CellKey, reference: &GaussianMixture, targets: &[usize], endpoint: &[f64]) -> Result<Self> {
        Ok(Self {
            key,
            assigned: mode_assignment(reference, endpoint)?,
            targets: targets.to_vec(),
        })
    }

    pub fn hit(&self) -> bool {
        self.targets.contains(&self.assigned)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionTally {
    pub condition: usize,
    pub cells: usize,
    pub failures: usize,
    pub corrected: usize,
}

impl ConditionTally {
    /// `corrected / failures`, or `None` when the baseline never failed.
    pub fn rate(&self) -> Option<f64> {
        (self.failures > 0).then(|| self.corrected as f64 / self.failures as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub per_condition: Vec<ConditionTally>,
    pub seeds: Vec<u64>,
    pub cells: usize,
    pub failures: usize,
    pub corrected: usize,
}

impl BenchReport {
    pub fn rate(&self) -> Option<f64> {
        (self.failures > 0).then(|| self.corrected as f64 / self.failures as f64)
    }

    /// Fraction of baseline cells that hit their target.
    pub fn baseline_hit_rate(&self) -> f64 {
        if self.cells == 0 {
            return 0.0;
        }
        (self.cells - self.failures) as f64 / self.cells as f64
    }
}

/// Baseline failures and how many of them the treated run fixes. Inputs must
/// list the same cells in the same order.
pub fn correction_rate(baseline: &[CellOutcome], treated: &[CellOutcome]) -> Result<BenchReport> {
    if baseline.len() != treated.len() {
        return Err(Error::Unpaired(format!(
            "{} baseline cells vs {} treated cells",
            baseline.len(),
            treated.len()
        )));
    }
    let mut per_condition: Vec<ConditionTally> = Vec::new();
    let mut seeds = BTreeSet::new();
    for (b, t) in baseline.iter().zip(treated) {
        if b.key != t.key || b.targets != t.targets {
            return Err(Error::Unpaired(format!("{:?} paired with {:?}", b.key, t.key)));
        }
        seeds.insert(b.key.seed);
        let idx = match per_condition.iter().position(|c| c.condition == b.key.condition) {
            Some(i) => i,
            None => {
                per_condition.push(ConditionTally {
                    condition: b.key.condition,
                    cells: 0,
                    failures: 0,
                    corrected: 0,
                });
                per_condition.len() - 1
            }
        };
        let tally = &mut per_condition[idx];
        tally.cells += 1;
        if !b.hit() {
            tally.failures += 1;
            if t.hit() {
                tally.corrected += 1;
            }
        }
    }
    per_condition.sort_by_key(|c| c.condition);
    let cells = per_condition.iter().map(|c| c.cells).sum();
    let failures = per_condition.iter().map(|c| c.failures).sum();
    let corrected = per_condition.iter().map(|c| c.corrected).sum();
    Ok(BenchReport {
        per_condition,
        seeds: seeds.into_iter().collect(),
        cells,
        failures,
        corrected,
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` (V-statistic),
/// computed exactly over all pairs.
pub fn energy_distance<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T]) -> Result<f64> {
    check_samples(a, b)?;
    let mean_cross = mean_pairwise(a, b);
    let mean_a = mean_pairwise(a, a);
    let mean_b = mean_pairwise(b, b);
    Ok((2.0 * mean_cross - mean_a - mean_b).max(0.0))
}

fn mean_pairwise<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += euclid(x.as_ref(), y.as_ref());
        }
    }
    sum / (a.len() * b.len()) as f64
}

fn check_samples<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("energy test needs two nonempty samples".into()));
    }
    let d = a[0].as_ref().len();
    check_set(a, d)?;
    check_set(b, d)?;
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyMethod {
    /// One-dimensional data: sort-based exact; small samples: full pairwise
    /// matrix; otherwise sliced with 32 directions.
    Auto,
    /// Exact all-pairs statistic (one dimension uses the sorted form).
    Exact,
    /// Average of one-dimensional energy distances over `directions`
    /// projections, rescaled so its expectation is the full statistic.
    Sliced { directions: usize },
}

/// Pooled sizes up to this use the exact pairwise matrix under [`EnergyMethod::Auto`].
pub const EXACT_POOL_LIMIT: usize = 2000;

/// Directions of the sliced statistic under [`EnergyMethod::Auto`].
pub const AUTO_DIRECTIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyTestConfig {
    pub permutations: usize,
    pub method: EnergyMethod,
    pub seed: u64,
}

impl Default for EnergyTestConfig {
    fn default() -> Self {
        Self {
            permutations: MIN_PERMUTATIONS,
            method: EnergyMethod::Auto,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub method: EnergyMethod,
}

/// Energy statistic and permutation p-value `(1 + #{T_perm >= T}) / (P + 1)`.
pub fn energy_test<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T], cfg: &EnergyTestConfig) -> Result<EnergyTest> {
    let d = check_samples(a, b)?;
    if cfg.permutations < MIN_PERMUTATIONS {
        return Err(Error::Config(format!(
            "at least {MIN_PERMUTATIONS} permutations are required, got {}",
            cfg.permutations
        )));
    }
    let pooled: Vec<&[f64]> = a
        .iter()
        .map(|x| x.as_ref())
        .chain(b.iter().map(|x| x.as_ref()))
        .collect();
    let n = a.len();
    let method = match cfg.method {
        EnergyMethod::Auto if d == 1 => EnergyMethod::Exact,
        EnergyMethod::Auto if pooled.len() <= EXACT_POOL_LIMIT => EnergyMethod::Exact,
        EnergyMethod::Auto => EnergyMethod::Sliced {
            directions: AUTO_DIRECTIONS,
        },
        m => m,
    };
    let stat: LabelStatistic = match method {
        EnergyMethod::Exact if d == 1 => {
            let z: Vec<f64> = pooled.iter().map(|x| x[0]).collect();
            let proj = SortedProjection::new(&z);
            Box::new(move |labels: &[bool]| proj.energy(labels))
        }
        EnergyMethod::Exact => {
            let m = pooled.len();
            let mut dist = vec![0.0; m * m];
            for i in 0..m {
                for j in i + 1..m {
                    let e = euclid(pooled[i], pooled[j]);
                    dist[i * m + j] = e;
                    dist[j * m + i] = e;
                }
            }
            Box::new(move |labels: &[bool]| matrix_energy(&dist, m, labels))
        }
        EnergyMethod::Sliced { directions } => {
            if directions == 0 {
                return Err(Error::Config("sliced energy test needs at least one direction".into()));
            }
            let dirs = slice_directions(d, directions, cfg.seed);
            let projections: Vec<SortedProjection> = dirs
                .iter()
                .map(|u| {
                    let z: Vec<f64> = pooled.iter().map(|x| dot(x, u)).collect();
                    SortedProjection::new(&z)
                })
                .collect();
            let scale = 1.0 / (directions as f64 * projection_constant(d));
            Box::new(move |labels: &[bool]| projections.iter().map(|p| p.energy(labels)).sum::<f64>() * scale)
        }
        EnergyMethod::Auto => unreachable!("resolved above"),
    };

    let mut labels: Vec<bool> = (0..pooled.len()).map(|i| i < n).collect();
    let observed = stat(&labels);
    let mut rng = stream(cfg.seed, 0, Stage::Permutation);
    let mut exceed = 0usize;
    for _ in 0..cfg.permutations {
        labels.shuffle(&mut rng);
        if stat(&labels) >= observed {
            exceed += 1;
        }
    }
    Ok(EnergyTest {
        statistic: observed.max(0.0),
        p_value: (1 + exceed) as f64 / (cfg.permutations + 1) as f64,
        permutations: cfg.permutations,
        method,
    })
}

type LabelStatistic = Box<dyn Fn(&[bool]) -> f64>;

/// `E|<u, X>| = c_d |X|` for `u` uniform on the unit sphere in `d` dimensions.
fn projection_constant(d: usize) -> f64 {
    let d = d as f64;
    libm::exp(libm::lgamma(d / 2.0) - libm::lgamma((d + 1.0) / 2.0)) / libm::sqrt(core::f64::consts::PI)
}

/// Evenly spaced half-circle angles in two dimensions, seeded random unit
/// vectors otherwise.
fn slice_directions(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    match d {
        1 => vec![vec![1.0]; count],
        2 => (0..count)
            .map(|k| {
                let a = core::f64::consts::PI * k as f64 / count as f64;
                vec![libm::cos(a), libm::sin(a)]
            })
            .collect(),
        _ => {
            let mut rng = stream(seed, 1, Stage::Permutation);
            (0..count)
                .map(|_| {
                    let mut u = vec![0.0; d];
                    loop {
                        fill_standard_normal(&mut rng, &mut u);
                        let n = libm::sqrt(dot(&u, &u));
                        if n > 1e-12 {
                            u.iter_mut().for_each(|x| *x /= n);
                            break u;
                        }
                    }
                })
                .collect()
        }
    }
}

/// Pooled 1-D values, centred and sorted, remembering original positions.
///
/// Within-group pair sums use `sum_{i<j} |z_i - z_j| = sum_k z_k (2 r_k - (n - 1))`
/// over sorted values with in-group rank `r_k`; the cross-group sum is the
/// pooled total minus both within-group sums. Every accumulator in the sweep
/// is an independent multiply-add on a 0/1 label, with no branches, because
/// permuted labels are unpredictable.
struct SortedProjection {
    values: Vec<f64>,
    /// `values[k] * k`.
    weighted: Vec<f64>,
    order: Vec<u32>,
    sum: f64,
    weighted_sum: f64,
    total: f64,
}

impl SortedProjection {
    fn new(z: &[f64]) -> Self {
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let mut order: Vec<u32> = (0..z.len() as u32).collect();
        order.sort_by(|&i, &j| z[i as usize].total_cmp(&z[j as usize]));
        let values: Vec<f64> = order.iter().map(|&i| z[i as usize] - mean).collect();
        let weighted: Vec<f64> = values.iter().enumerate().map(|(k, v)| v * k as f64).collect();
        let n = values.len() as f64;
        let sum = values.iter().sum();
        let weighted_sum = weighted.iter().sum();
        let total = 2.0 * weighted_sum - (n - 1.0) * sum;
        Self {
            values,
            weighted,
            order,
            sum,
            weighted_sum,
            total,
        }
    }

    /// 1-D energy distance between the `true` and `false` labelled points.
    fn energy(&self, labels: &[bool]) -> f64 {
        // a = true-labelled group; count_a is the number of a-points before k
        let (mut count_a, mut sum_a, mut ranked_a, mut weighted_a, mut ranked_all) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((z, w), &i) in self.values.iter().zip(&self.weighted).zip(&self.order) {
            let m = labels[i as usize] as u8 as f64;
            ranked_all += z * count_a;
            ranked_a += m * z * count_a;
            weighted_a += m * w;
            sum_a += m * z;
            count_a += m;
        }
        let n = self.values.len() as f64;
        let (n_a, n_b) = (count_a, n - count_a);
        let sum_b = self.sum - sum_a;
        let ranked_b = (self.weighted_sum - weighted_a) - (ranked_all - ranked_a);
        let s_aa = 2.0 * ranked_a - (n_a - 1.0) * sum_a;
        let s_bb = 2.0 * ranked_b - (n_b - 1.0) * sum_b;
        let s_ab = self.total - s_aa - s_bb;
        2.0 * s_ab / (n_a * n_b) - 2.0 * s_aa / (n_a * n_a) - 2.0 * s_bb / (n_b * n_b)
    }
}

fn matrix_energy(dist: &[f64], m: usize, labels: &[bool]) -> f64 {
    let (mut s_aa, mut s_bb, mut s_ab) = (0.0, 0.0, 0.0);
    let n_a = labels.iter().filter(|l| **l).count() as f64;
    let n_b = m as f64 - n_a;
    for i in 0..m {
        let row = &dist[i * m..(i + 1) * m];
        for j in i + 1..m {
            match (labels[i], labels[j]) {
                (true, true) => s_aa += row[j],
                (false, false) => s_bb += row[j],
                _ => s_ab += row[j],
            }
        }
    }
    2.0 * s_ab / (n_a * n_b) - 2.0 * s_aa / (n_a * n_a) - 2.0 * s_bb / (n_b * n_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianComponent;
    use crate::rng::standard_normal_vec;

    fn random_states(seed: u64, count: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, 0, Stage::Path);
        (0..count).map(|_| standard_normal_vec(&mut rng, d)).collect()
    }

    #[test]
    fn identical_states_have_no_volume() {
        let s = vec![vec![0.5; 10]; 8];
        assert_eq!(gram_log_volume(&s).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn orthonormal_cell_has_unit_volume() {
        let d = 9;
        let mut s: Vec<Vec<f64>> = (0..7)
            .map(|i| {
                let mut e = vec![1.0; d];
                e[i] += 1.0;
                e
            })
            .collect();
        s.push(vec![1.0; d]);
        assert!(gram_log_volume(&s).unwrap().abs() < 1e-14);
    }

    #[test]
    fn volume_argument_checks() {
        assert!(matches!(
            gram_log_volume(&random_states(0, 7, 10)),
            Err(Error::WrongCount { .. })
        ));
        assert!(gram_log_volume(&random_states(0, 8, 6)).is_err());
        let mut ragged = random_states(0, 8, 10);
        ragged[3].pop();
        assert!(gram_log_volume(&ragged).is_err());
    }

    #[test]
    fn largest_drop_prefers_earliest_and_infinite() {
        let trace = VolumeTrace {
            times: vec![0.9, 0.6, 0.3, 0.1],
            log_volume: vec![0.0, -2.0, -4.0, -4.5],
        };
        assert_eq!(trace.largest_drop_step(), Some(0));
        assert!(trace.collapsed());
        let inf = VolumeTrace {
            times: vec![0.9, 0.6, 0.3],
            log_volume: vec![0.0, -5.0, f64::NEG_INFINITY],
        };
        assert_eq!(inf.largest_drop_step(), Some(1));
    }

    #[test]
    fn effective_rank_cases() {
        let v = [0.3, -1.0, 2.0];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert_eq!(effective_rank(&[v.to_vec(), w], 1e-10).unwrap(), 1);
        assert_eq!(effective_rank(&[vec![1.0, 0.0], vec![1.0, 0.5]], 1e-10).unwrap(), 2);
        assert_eq!(effective_rank(&random_states(3, 7, 32), 1e-8).unwrap(), 7);
        assert_eq!(effective_rank(&[vec![0.0, 0.0]], 1e-10).unwrap(), 0);
    }

    fn two_modes() -> GaussianMixture {
        GaussianMixture::new(
            vec![
                GaussianComponent::isotropic(vec![-3.0, 0.0], 0.2).unwrap(),
                GaussianComponent::isotropic(vec![3.0, 0.0], 0.2).unwrap(),
            ],
            vec![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn mode_assignment_cases() {
        let m = two_modes();
        assert_eq!(mode_assignment(&m, &[3.0, 0.0]).unwrap(), 1);
        assert_eq!(mode_assignment(&m, &[-3.0, 0.0]).unwrap(), 0);
        assert_eq!(mode_assignment(&m, &[0.0, 1.0]).unwrap(), 0);
        // far from everything: responsibilities underflow but log posteriors do not
        assert_eq!(mode_assignment(&m, &[1e4, 0.0]).unwrap(), 1);
        assert!(mode_assignment(&m, &[f64::NAN, 0.0]).is_err());
    }

    fn outcome(condition: usize, particle: u64, assigned: usize) -> CellOutcome {
        CellOutcome {
            key: CellKey {
                condition,
                seed: 7,
                particle,
            },
            assigned,
            targets: vec![1],
        }
    }

    #[test]
    fn correction_rate_cases() {
        let ok: Vec<_> = (0..4).map(|p| outcome(0, p, 1)).collect();
        let r = correction_rate(&ok, &ok).unwrap();
        assert_eq!((r.failures, r.rate()), (0, None));
        assert_eq!(r.baseline_hit_rate(), 1.0);

        let bad: Vec<_> = (0..4).map(|p| outcome(p as usize % 2, p, 0)).collect();
        let r = correction_rate(&bad, &bad).unwrap();
        assert_eq!((r.failures, r.rate()), (4, Some(0.0)));
        assert_eq!(r.per_condition.len(), 2);

        let treated: Vec<_> = (0..4).map(|p| outcome(p as usize % 2, p, (p % 2) as usize)).collect();
        let r = correction_rate(&bad, &treated).unwrap();
        assert_eq!(r.corrected, 2);
        assert_eq!(r.per_condition[1].rate(), Some(1.0));
        assert_eq!(r.seeds, vec![7]);

        assert!(matches!(correction_rate(&bad, &treated[..3]), Err(Error::Unpaired(_))));
        let mut swapped = treated.clone();
        swapped.swap(0, 1);
        assert!(correction_rate(&bad, &swapped).is_err());
    }

    #[test]
    fn energy_of_identical_sets_is_zero() {
        let a = random_states(1, 50, 3);
        assert_eq!(energy_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn sorted_form_matches_pairwise() {
        let a = random_states(2, 40, 1);
        let b: Vec<Vec<f64>> = random_states(3, 60, 1).into_iter().map(|x| vec![x[0] + 0.4]).collect();
        let pooled: Vec<f64> = a.iter().chain(&b).map(|x| x[0]).collect();
        let labels: Vec<bool> = (0..100).map(|i| i < 40).collect();
        let sorted = SortedProjection::new(&pooled).energy(&labels);
        assert!((sorted - energy_distance(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn matrix_form_matches_pairwise() {
        let a = random_states(4, 30, 3);
        let b = random_states(5, 20, 3);
        let pooled: Vec<&Vec<f64>> = a.iter().chain(&b).collect();
        let m = pooled.len();
        let mut dist = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                dist[i * m + j] = euclid(pooled[i], pooled[j]);
            }
        }
        let labels: Vec<bool> = (0..m).map(|i| i < 30).collect();
        assert!((matrix_energy(&dist, m, &labels) - energy_distance(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn sliced_statistic_approximates_exact() {
        let a = random_states(6, 300, 2);
        let b: Vec<Vec<f64>> = random_states(7, 300, 2)
            .into_iter()
            .map(|x| vec![x[0] + 1.0, x[1]])
            .collect();
        let exact = energy_test(&a, &b, &EnergyTestConfig::default()).unwrap();
        let sliced = energy_test(
            &a,
            &b,
            &EnergyTestConfig {
                method: EnergyMethod::Sliced { directions: 64 },
                ..EnergyTestConfig::default()
            },
        )
        .unwrap();
        assert_eq!(exact.method, EnergyMethod::Exact);
        assert!((sliced.statistic - exact.statistic).abs() < 0.01 * exact.statistic);
        assert!(exact.p_value < 0.01 && sliced.p_value < 0.01);
    }

    #[test]
    fn projection_constants() {
        assert!((projection_constant(1) - 1.0).abs() < 1e-14);
        assert!((projection_constant(2) - 2.0 / core::f64::consts::PI).abs() < 1e-14);
        assert!((projection_constant(3) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn separated_samples_are_detected() {
        let a = random_states(8, 2000, 1);
        let b: Vec<Vec<f64>> = random_states(9, 2000, 1)
            .into_iter()
            .map(|x| vec![x[0] + 5.0])
            .collect();
        let r = energy_test(&a, &b, &EnergyTestConfig::default()).unwrap();
        assert!(r.p_value < 0.01);
        assert_eq!(r.permutations, 200);
    }

    #[test]
    fn too_few_permutations_rejected() {
        let a = random_states(8, 10, 1);
        let cfg = EnergyTestConfig {
            permutations: 50,
            ..EnergyTestConfig::default()
        };
        assert!(energy_test(&a, &a, &cfg).is_err());
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(energy_test(&a, &empty, &EnergyTestConfig::default()).is_err());
    }
}
