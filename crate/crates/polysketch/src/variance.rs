//! Closed-form variances of single-feature polynomial sketches, the
//! TensorSRHT variance and its convex surrogate, and the Bernstein-type
//! feature-count bound.
//!
//! All variances are for `D = 1`; divide by `D` for i.i.d. features. The
//! unstructured formula is parameterized by the weight moments
//! `q = E[Re(z)^2]` and `m4 = E[|z|^4]`, which covers the real and complex,
//! Gaussian and Rademacher sketches with one expression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketches::{dot, Family, Field};

/// Weight moments `q = E[a^2]` for `z = a + ib` and `m4 = E[|z|^4]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchMoments {
    pub q: f64,
    pub m4: f64,
}

impl SketchMoments {
    pub const RADEMACHER_REAL: Self = Self { q: 1.0, m4: 1.0 };
    pub const GAUSSIAN_REAL: Self = Self { q: 1.0, m4: 3.0 };
    pub const RADEMACHER_COMPLEX: Self = Self { q: 0.5, m4: 1.0 };
    pub const GAUSSIAN_COMPLEX: Self = Self { q: 0.5, m4: 2.0 };

    pub fn new(q: f64, m4: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::invalid(format!("q must lie in [0, 1], got {q}")));
        }
        if !(m4 >= 1.0) {
            return Err(Error::invalid(format!("m4 must be at least 1, got {m4}")));
        }
        Ok(Self { q, m4 })
    }

    /// Moments of the weights drawn by the unstructured sketch builder.
    pub fn for_sketch(family: Family, field: Field) -> Self {
        match (family, field) {
            (Family::Rademacher, Field::Real) => Self::RADEMACHER_REAL,
            (Family::Gaussian, Field::Real) => Self::GAUSSIAN_REAL,
            (Family::Rademacher, Field::Complex) => Self::RADEMACHER_COMPLEX,
            (Family::Gaussian, Field::Complex) => Self::GAUSSIAN_COMPLEX,
        }
    }

    /// Moments of unit-modulus weights over a field (TensorSRHT).
    pub fn unit_modulus(field: Field) -> Self {
        Self::for_sketch(Family::Rademacher, field)
    }

    /// The `(2q - 1)^2 + 1` factor on the off-diagonal cross terms.
    fn cross_factor(&self) -> f64 {
        let t = 2.0 * self.q - 1.0;
        t * t + 1.0
    }
}

/// The three scalars of a pair `(x, y)` that every formula depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    /// `x^T y`
    pub dot: f64,
    /// `||x||^2 ||y||^2`
    pub norms_sq: f64,
    /// `sum_k x_k^2 y_k^2`
    pub diag_sq: f64,
}

impl PairStats {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        let dot = dot(x, y)?;
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let ny: f64 = y.iter().map(|v| v * v).sum();
        let diag_sq = x.iter().zip(y).map(|(a, b)| a * a * b * b).sum();
        Ok(Self {
            dot,
            norms_sq: nx * ny,
            diag_sq,
        })
    }

    /// Base of the power in the unstructured formula: the second moment of
    /// one degree-1 projection product.
    pub fn base(&self, m: SketchMoments) -> f64 {
        m.m4 * self.diag_sq + self.norms_sq - self.diag_sq
            + m.cross_factor() * (self.dot * self.dot - self.diag_sq)
    }

    /// Unstructured single-feature variance for degree `n`.
    pub fn var_unstructured(&self, n: u32, m: SketchMoments) -> f64 {
        let v = self.base(m).powi(n as i32) - self.dot.powi(2 * n as i32);
        v.max(0.0)
    }

    /// Single-feature variance and same-block covariance term of a
    /// TensorSRHT with Hadamard length `d`.
    pub fn tensor_srht_terms(&self, n: u32, d: usize, q: f64) -> Result<VarianceTerms> {
        if d < 2 {
            return Err(Error::UnsupportedDimension(
                "TensorSRHT variance needs a Hadamard length of at least 2".into(),
            ));
        }
        let m = SketchMoments { q, m4: 1.0 };
        let v1 = self.var_unstructured(1, m);
        let t2 = self.dot * self.dot;
        let v = self.var_unstructured(n, m);
        let cov = (t2 - v1 / (d as f64 - 1.0)).powi(n as i32) - t2.powi(n as i32);
        Ok(VarianceTerms { v, cov })
    }
}

/// `V`: single-feature variance; `Cov`: covariance of two distinct
/// features that share a TensorSRHT block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceTerms {
    pub v: f64,
    pub cov: f64,
}

/// Single-feature variance of an unstructured degree-`n` sketch with
/// i.i.d. weights of the given moments.
pub fn var_unstructured(x: &[f64], y: &[f64], n: u32, moments: SketchMoments) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("degree must be at least 1"));
    }
    Ok(PairStats::new(x, y)?.var_unstructured(n, moments))
}

/// Normalized variance constant used in the concentration bound
/// (unit-modulus weights, `m4 = 1`).
pub fn sigma_sq_bound(x: &[f64], y: &[f64], p: u32, q: f64) -> Result<f64> {
    let s = PairStats::new(x, y)?;
    if !(s.norms_sq > 0.0) {
        return Err(Error::invalid("sigma^2 bound needs nonzero input norms"));
    }
    let m = SketchMoments { q, m4: 1.0 };
    let num = (s.norms_sq + m.cross_factor() * (s.dot * s.dot - s.diag_sq)).powi(p as i32)
        - s.dot.powi(2 * p as i32);
    Ok(num / s.norms_sq.powi(p as i32))
}

/// Smallest `D` with `D >= 2 (2/(3 eps) + sigma^2/eps^2) ln(2/delta)`.
pub fn bernstein_feature_count(sigma_sq: f64, eps: f64, delta: f64) -> Result<u64> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if !(delta > 0.0 && delta < 2.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 2), got {delta}")));
    }
    if !(sigma_sq >= 0.0) {
        return Err(Error::invalid("sigma^2 must be nonnegative"));
    }
    let bound = 2.0 * (2.0 / (3.0 * eps) + sigma_sq / (eps * eps)) * (2.0 / delta).ln();
    // Guard against `ceil` overshooting an exact integer by one ulp.
    let r = bound.round();
    let d = if (bound - r).abs() <= 1e-9 * r.max(1.0) { r } else { bound.ceil() };
    Ok(d.max(1.0) as u64)
}

/// Number of ordered pairs `(l, l')`, `l != l'`, of features that share a
/// block when `D` features are cut into blocks of `d`.
pub fn c_pairs(big_d: u64, d: u64) -> u64 {
    let full = big_d / d;
    let rem = big_d % d;
    full * d * (d - 1) + rem * rem.saturating_sub(1)
}

/// `V / D + c(D, d) Cov / D^2`.
pub fn tensor_srht_variance_from_terms(t: VarianceTerms, big_d: u64, d: u64) -> f64 {
    let df = big_d as f64;
    t.v / df + c_pairs(big_d, d) as f64 * t.cov / (df * df)
}

/// Convex surrogate of [`tensor_srht_variance_from_terms`] as a function of
/// `D`.
pub fn surrogate_from_terms(t: VarianceTerms, big_d: u64, d: u64) -> f64 {
    let df = big_d as f64;
    if t.cov > 0.0 || big_d > d {
        // The numerator is `d` times the variance of one full block.
        (t.v + (d as f64 - 1.0) * t.cov).max(0.0) / df
    } else {
        (t.v - t.cov) / df + t.cov
    }
}

fn check_structured(big_d: u64, d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::UnsupportedDimension(
            "TensorSRHT variance is undefined for d = 1".into(),
        ));
    }
    if big_d == 0 {
        return Err(Error::invalid("feature count must be at least 1"));
    }
    Ok(())
}

/// Variance of a degree-`n` TensorSRHT with `big_d` features and Hadamard
/// length `d`. Only `moments.q` matters; the weights have unit modulus.
pub fn var_tensor_srht(
    x: &[f64],
    y: &[f64],
    n: u32,
    big_d: u64,
    d: usize,
    moments: SketchMoments,
) -> Result<f64> {
    check_structured(big_d, d)?;
    let t = PairStats::new(x, y)?.tensor_srht_terms(n, d, moments.q)?;
    Ok(tensor_srht_variance_from_terms(t, big_d, d as u64).max(0.0))
}

/// Convex surrogate of [`var_tensor_srht`].
pub fn surrogate_var_tensor_srht(
    x: &[f64],
    y: &[f64],
    n: u32,
    big_d: u64,
    d: usize,
    moments: SketchMoments,
) -> Result<f64> {
    check_structured(big_d, d)?;
    let t = PairStats::new(x, y)?.tensor_srht_terms(n, d, moments.q)?;
    Ok(surrogate_from_terms(t, big_d, d as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_rademacher_has_zero_variance() {
        for n in 1..8 {
            for m in [SketchMoments::RADEMACHER_REAL, SketchMoments::RADEMACHER_COMPLEX] {
                assert_eq!(var_unstructured(&[1.3], &[-0.7], n, m).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn unit_vector_gaussian_values() {
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(var_unstructured(&e1, &e1, 1, SketchMoments::GAUSSIAN_REAL).unwrap(), 2.0);
        assert_eq!(var_unstructured(&e1, &e1, 1, SketchMoments::GAUSSIAN_COMPLEX).unwrap(), 1.0);
    }

    #[test]
    fn sigma_sq_on_uniform_vectors() {
        for d in [2usize, 5, 16] {
            let x = vec![1.0 / (d as f64).sqrt(); d];
            for p in 1..6 {
                let c = sigma_sq_bound(&x, &x, p, 0.5).unwrap();
                let r = sigma_sq_bound(&x, &x, p, 1.0).unwrap();
                let df = d as f64;
                assert!((c - ((2.0 - 1.0 / df).powi(p as i32) - 1.0)).abs() < 1e-12);
                assert!((r - ((3.0 - 2.0 / df).powi(p as i32) - 1.0)).abs() < 1e-12);
            }
        }
        let s = sigma_sq_bound(&[1.0, 0.0], &[0.0, 2.0], 1, 0.5).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(sigma_sq_bound(&[0.0], &[1.0], 1, 0.5).is_err());
    }

    #[test]
    fn bernstein_examples() {
        let delta = 2.0 / std::f64::consts::E.powi(2);
        assert_eq!(bernstein_feature_count(0.0, 1.0, delta).unwrap(), 3);
        assert_eq!(bernstein_feature_count(1.0, 0.1, 0.05).unwrap(), 787);
        assert!(bernstein_feature_count(1.0, 0.0, 0.1).is_err());
        assert!(bernstein_feature_count(1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn pair_counts() {
        assert_eq!(c_pairs(4, 4), 12);
        assert_eq!(c_pairs(6, 4), 14);
        assert_eq!(c_pairs(3, 4), 6);
        assert_eq!(c_pairs(1, 4), 0);
    }

    #[test]
    fn linear_full_block_has_zero_variance() {
        let x = [0.2, -0.4, 0.9, 0.1];
        let y = [0.5, 0.3, -0.2, 0.7];
        for m in [SketchMoments::RADEMACHER_REAL, SketchMoments::RADEMACHER_COMPLEX] {
            assert!(var_tensor_srht(&x, &y, 1, 4, 4, m).unwrap().abs() < 1e-15);
        }
        assert!(var_tensor_srht(&[1.0], &[1.0], 1, 1, 1, SketchMoments::RADEMACHER_REAL).is_err());
    }

    #[test]
    fn surrogate_edges() {
        let x = [0.2, -0.4, 0.9, 0.1];
        let y = [0.5, 0.3, -0.2, 0.7];
        let m = SketchMoments::RADEMACHER_COMPLEX;
        let v1 = var_unstructured(&x, &y, 3, m).unwrap();
        let s1 = surrogate_var_tensor_srht(&x, &y, 3, 1, 4, m).unwrap();
        let t = PairStats::new(&x, &y).unwrap().tensor_srht_terms(3, 4, 0.5).unwrap();
        if t.cov <= 0.0 {
            assert!((s1 - v1).abs() <= 1e-12 * v1.max(1.0));
        }
        let a = (t.v - t.cov) / 4.0 + t.cov;
        let b = (t.v + 3.0 * t.cov) / 4.0;
        assert!((a - b).abs() < 1e-14);
    }
}
