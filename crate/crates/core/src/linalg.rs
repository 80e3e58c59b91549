//! Dense vector helpers and a one-sided Jacobi SVD for short, wide matrices.

use alloc::vec::Vec;

use crate::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub(crate) fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

/// Numerically stable `ln(sum(exp(v)))`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(sum)
}

const JACOBI_SWEEPS: usize = 60;

/// Singular values of a row-major `rows x cols` matrix, sorted descending.
///
/// One-sided Jacobi on the rows: pairs of rows are rotated until mutually
/// orthogonal, after which the row norms are the singular values. This works
/// directly on the matrix instead of its Gram matrix, so small singular values
/// keep their relative accuracy. Intended for few rows (the volume and rank
/// diagnostics use at most a handful) and any number of columns.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            expected: rows * cols,
            found: data.len(),
        });
    }
    let mut a = data.to_vec();
    if rows > 1 {
        for _ in 0..JACOBI_SWEEPS {
            let mut rotated = false;
            for p in 0..rows - 1 {
                for q in p + 1..rows {
                    let (alpha, beta, gamma) = {
                        let rp = &a[p * cols..(p + 1) * cols];
                        let rq = &a[q * cols..(q + 1) * cols];
                        (dot(rp, rp), dot(rq, rq), dot(rp, rq))
                    };
                    if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let tan = zeta.signum() / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                    let cos = 1.0 / libm::sqrt(1.0 + tan * tan);
                    let sin = cos * tan;
                    for k in 0..cols {
                        let xp = a[p * cols + k];
                        let xq = a[q * cols + k];
                        a[p * cols + k] = cos * xp - sin * xq;
                        a[q * cols + k] = sin * xp + cos * xq;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
    }
    let mut sv: Vec<f64> = (0..rows).map(|r| norm(&a[r * cols..(r + 1) * cols])).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_handles_large_offsets() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + core::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = [3.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0];
        let sv = singular_values(&m, 2, 4).unwrap();
        assert_eq!(sv, vec![5.0, 3.0]);
    }

    #[test]
    fn singular_values_of_rank_one() {
        let m = [1.0, 2.0, 3.0, 2.0, 4.0, 6.0];
        let sv = singular_values(&m, 2, 3).unwrap();
        assert!((sv[0] - (5.0 * 14.0f64).sqrt()).abs() < 1e-12);
        assert!(sv[1] < 1e-14);
    }

    #[test]
    fn singular_values_match_two_by_two_closed_form() {
        // [[a, b], [c, d]]: s1^2 + s2^2 = frobenius^2 and s1 s2 = |det|
        let m = [2.0, -1.0, 0.5, 3.0];
        let sv = singular_values(&m, 2, 2).unwrap();
        let fro = 4.0 + 1.0 + 0.25 + 9.0;
        let det: f64 = 2.0 * 3.0 + 0.5;
        assert!((sv[0] * sv[0] + sv[1] * sv[1] - fro).abs() < 1e-12);
        assert!((sv[0] * sv[1] - det.abs()).abs() < 1e-12);
    }
}
