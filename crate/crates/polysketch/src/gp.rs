//! Gaussian-process regression in (complex) feature space.
//!
//! With features `Phi` (`N x D`), noise variances `sigma^2` and targets `y`,
//! the approximate posterior is computed through the `D x D` system
//! `B = Phi^H diag(sigma^-2) Phi + I`:
//!
//! - mean `mu(x) = Re{ Phi(x)^T B^{-1} Phi^H diag(sigma^-2) y }`
//! - variance `v(x) = Re{ Phi(x)^T B^{-1} conj(Phi(x)) }`
//!
//! which costs `O(N D^2 + D^3)` and never forms an `N x N` matrix.
//! Arithmetic stays complex until the final real-part extraction.
//! [`exact_gp_reference`] is the direct `O(N^3)` posterior used as an
//! oracle and as the exact side of the KL metric.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::sketches::FeatureMatrix;

/// Per-observation noise variances and the relative jitter floor used if
/// the Cholesky factorization needs regularizing.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    variances: Vec<f64>,
    jitter: f64,
}

impl NoiseModel {
    pub const DEFAULT_JITTER: f64 = 1e-10;

    pub fn heteroscedastic(variances: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = variances.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::invalid(format!(
                "noise variance {v} at observation {i} is not positive"
            )));
        }
        Ok(Self {
            variances,
            jitter: Self::DEFAULT_JITTER,
        })
    }

    pub fn homoscedastic(n: usize, variance: f64) -> Result<Self> {
        Self::heteroscedastic(vec![variance; n])
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter > 0.0) {
            return Err(Error::invalid("jitter must be positive"));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }
}

/// Factorized feature-space posterior.
#[derive(Debug, Clone)]
pub struct GPFit {
    chol: Cholesky<Complex64, Dyn>,
    coef: DVector<Complex64>,
    is_real: bool,
    /// Diagonal jitter that was added to `B` (0 if none was needed).
    pub jitter_used: f64,
}

impl GPFit {
    pub fn num_features(&self) -> usize {
        self.coef.len()
    }

    pub fn is_real(&self) -> bool {
        self.is_real
    }

    /// `B^{-1} Phi^H diag(sigma^-2) y`.
    pub fn coefficients(&self) -> &DVector<Complex64> {
        &self.coef
    }

    /// Lower Cholesky factor of (possibly jittered) `B`.
    pub fn cholesky_factor(&self) -> DMatrix<Complex64> {
        self.chol.l()
    }
}

/// Posterior mean and marginal variance at a set of test points.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PosteriorSummary {
    /// Adds a nonnegative per-point term to the variances.
    pub fn with_variance_offset(mut self, offsets: &[f64]) -> Result<Self> {
        if offsets.len() != self.variance.len() {
            return Err(Error::dim("variance offset", self.variance.len(), offsets.len()));
        }
        for (v, o) in self.variance.iter_mut().zip(offsets) {
            *v += o.max(0.0);
        }
        Ok(self)
    }
}

/// Cholesky with the jitter escalation policy: plain first, then
/// `jitter * trace/D` times 1, 10, 100 and 1000.
fn factor_with_jitter(
    b: DMatrix<Complex64>,
    rel_jitter: f64,
) -> Result<(Cholesky<Complex64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(b.clone()) {
        return Ok((c, 0.0));
    }
    let dim = b.nrows().max(1);
    let trace: f64 = (0..b.nrows()).map(|i| b[(i, i)].re).sum();
    let base = rel_jitter * trace.abs().max(f64::MIN_POSITIVE) / dim as f64;
    let mut jitter = base;
    for _ in 0..4 {
        let mut bj = b.clone();
        for i in 0..b.nrows() {
            bj[(i, i)] += Complex64::new(jitter, 0.0);
        }
        if let Some(c) = Cholesky::new(bj) {
            log::debug!("Cholesky needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky of the {dim}x{dim} system failed after jitter up to {:e} (trace {trace:e})",
        jitter / 10.0
    )))
}

/// Fits the feature-space posterior.
pub fn fit_gp(phi: &FeatureMatrix, y: &[f64], noise: &NoiseModel) -> Result<GPFit> {
    let n = phi.rows();
    if y.len() != n {
        return Err(Error::dim("fit_gp targets", n, y.len()));
    }
    if noise.variances.len() != n {
        return Err(Error::dim("fit_gp noise", n, noise.variances.len()));
    }
    let d = phi.cols();
    let mut scaled = phi.matrix().clone();
    for (i, &s2) in noise.variances.iter().enumerate() {
        let s = 1.0 / s2.sqrt();
        scaled.row_mut(i).iter_mut().for_each(|z| *z *= s);
    }
    let mut b = scaled.adjoint() * &scaled;
    for i in 0..d {
        b[(i, i)] += Complex64::new(1.0, 0.0);
    }
    let weighted_y = DVector::from_iterator(
        n,
        y.iter()
            .zip(&noise.variances)
            .map(|(&yi, &s2)| Complex64::new(yi / s2, 0.0)),
    );
    let rhs = phi.matrix().adjoint() * weighted_y;
    let (chol, jitter_used) = factor_with_jitter(b, noise.jitter)?;
    let coef = chol.solve(&rhs);
    if coef.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("non-finite GP coefficients".into()));
    }
    Ok(GPFit {
        chol,
        coef,
        is_real: phi.is_real(),
        jitter_used,
    })
}

/// Posterior mean and variance at the rows of `phi_star`.
pub fn predict(fit: &GPFit, phi_star: &FeatureMatrix) -> Result<PosteriorSummary> {
    let d = fit.num_features();
    if phi_star.cols() != d {
        return Err(Error::dim("predict features", d, phi_star.cols()));
    }
    let mean_c = phi_star.matrix() * &fit.coef;
    // v(x) = phi^T B^{-1} conj(phi) = || L^{-1} conj(phi) ||^2.
    let rhs = phi_star.matrix().map(|z| z.conj()).transpose();
    let l = fit.chol.l();
    let solved = l
        .solve_lower_triangular(&rhs)
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let variance = (0..phi_star.rows())
        .map(|j| solved.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().max(0.0))
        .collect();
    Ok(PosteriorSummary {
        mean: mean_c.iter().map(|z| z.re).collect(),
        variance,
    })
}

/// Direct posterior from kernel matrices: `k_train` (`N x N`, Hermitian
/// PSD), `k_cross` (`M x N`, rows are test points) and the prior variances
/// at the test points.
pub fn exact_gp_reference(
    k_train: &DMatrix<Complex64>,
    k_cross: &DMatrix<Complex64>,
    k_test_diag: &[f64],
    y: &[f64],
    noise: &NoiseModel,
) -> Result<PosteriorSummary> {
    let n = k_train.nrows();
    if k_train.ncols() != n {
        return Err(Error::dim("exact_gp_reference square", n, k_train.ncols()));
    }
    if k_cross.ncols() != n {
        return Err(Error::dim("exact_gp_reference cross", n, k_cross.ncols()));
    }
    if k_test_diag.len() != k_cross.nrows() {
        return Err(Error::dim("exact_gp_reference test diag", k_cross.nrows(), k_test_diag.len()));
    }
    if y.len() != n || noise.variances.len() != n {
        return Err(Error::dim("exact_gp_reference targets", n, y.len().min(noise.variances.len())));
    }
    let mut a = k_train.clone();
    for (i, &s2) in noise.variances.iter().enumerate() {
        a[(i, i)] += Complex64::new(s2, 0.0);
    }
    let chol = Cholesky::new(a).ok_or_else(|| {
        Error::Numerical("Cholesky of K + diag(sigma^2) failed; K is not PSD".into())
    })?;
    let yc = DVector::from_iterator(n, y.iter().map(|&v| Complex64::new(v, 0.0)));
    let alpha = chol.solve(&yc);
    let mean = k_cross * alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k_cross.adjoint())
        .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
    let variance = (0..k_cross.nrows())
        .map(|j| {
            let reduction: f64 = v.column(j).iter().map(|z| z.norm_sqr()).sum();
            (k_test_diag[j] - reduction).max(0.0)
        })
        .collect();
    Ok(PosteriorSummary {
        mean: mean.iter().map(|z| z.re).collect(),
        variance,
    })
}

/// Real-kernel convenience wrapper around [`exact_gp_reference`].
pub fn exact_gp_reference_real(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_test_diag: &[f64],
    y: &[f64],
    noise: &NoiseModel,
) -> Result<PosteriorSummary> {
    let c = |m: &DMatrix<f64>| m.map(|v| Complex64::new(v, 0.0));
    exact_gp_reference(&c(k_train), &c(k_cross), k_test_diag, y, noise)
}

/// Transformed regression targets and noise variances for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletTargets {
    pub targets: Vec<f64>,
    pub variances: Vec<f64>,
}

/// One-hot encodes integer labels in `0..num_classes`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<DMatrix<f64>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{num_classes}")));
    }
    Ok(DMatrix::from_fn(labels.len(), num_classes, |i, c| {
        if labels[i] == c {
            1.0
        } else {
            0.0
        }
    }))
}

/// Per-class log-space targets `log(y + alpha) - s^2/2` with noise
/// variances `s^2 = log(1/(y + alpha) + 1)`.
pub fn dirichlet_transform(labels: &DMatrix<f64>, alpha: f64) -> Result<Vec<DirichletTargets>> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    for i in 0..labels.nrows() {
        let row = labels.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::invalid(format!("label row {i} is not one-hot")));
        }
    }
    Ok((0..labels.ncols())
        .map(|c| {
            let (targets, variances) = labels
                .column(c)
                .iter()
                .map(|&y| {
                    let s2 = (1.0 / (y + alpha) + 1.0).ln();
                    ((y + alpha).ln() - s2 / 2.0, s2)
                })
                .unzip();
            DirichletTargets { targets, variances }
        })
        .collect())
}

/// Class probabilities: the average over `n_mc` joint latent draws of the
/// softmax of per-class posterior samples.
pub fn classify(
    fits: &[GPFit],
    phi_star: &FeatureMatrix,
    n_mc: usize,
    stream: &RngStream,
) -> Result<DMatrix<f64>> {
    let c = fits.len();
    if c < 2 {
        return Err(Error::invalid(format!("classification needs at least 2 classes, got {c}")));
    }
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be at least 1"));
    }
    let posts: Vec<PosteriorSummary> =
        fits.iter().map(|f| predict(f, phi_star)).collect::<Result<_>>()?;
    let m = phi_star.rows();
    let mut rng = stream.rng();
    let mut probs = DMatrix::zeros(m, c);
    let mut z = vec![0.0; c];
    for j in 0..m {
        let mut acc = vec![0.0; c];
        for _ in 0..n_mc {
            for (k, post) in posts.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                z[k] = post.mean[j] + post.variance[j].sqrt() * e;
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let s: f64 = exps.iter().sum();
            for (a, e) in acc.iter_mut().zip(&exps) {
                *a += e / s;
            }
        }
        let total: f64 = acc.iter().sum();
        for k in 0..c {
            probs[(j, k)] = acc[k] / total;
        }
    }
    Ok(probs)
}

fn check_gaussians(mu_a: &[f64], var_a: &[f64], mu_e: &[f64], var_e: &[f64]) -> Result<()> {
    let n = mu_a.len();
    if var_a.len() != n || mu_e.len() != n || var_e.len() != n {
        return Err(Error::dim("kl_diag_gaussians", n, var_a.len().min(mu_e.len()).min(var_e.len())));
    }
    if var_a.iter().chain(var_e).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("KL divergence needs positive variances"));
    }
    Ok(())
}

/// `1/2 sum_i (s_e/s_a + ln(s_e/s_a) - 1 + (mu_e - mu_a)^2 / s_a)` for
/// approximate `(mu_a, s_a)` and exact `(mu_e, s_e)` diagonal Gaussians.
///
/// This is the commonly quoted closed form, kept for comparability. Its log
/// term has the opposite sign of a true divergence, so it is negative
/// whenever `s_e` is sufficiently smaller than `s_a`. Use
/// [`kl_divergence_diag`] when a nonnegative divergence is needed.
pub fn kl_diag_gaussians(mu_a: &[f64], var_a: &[f64], mu_e: &[f64], var_e: &[f64]) -> Result<f64> {
    check_gaussians(mu_a, var_a, mu_e, var_e)?;
    let mut kl = 0.0;
    for i in 0..mu_a.len() {
        let r = var_e[i] / var_a[i];
        let dm = mu_e[i] - mu_a[i];
        kl += r + r.ln() - 1.0 + dm * dm / var_a[i];
    }
    Ok(0.5 * kl)
}

/// `KL[N(mu_a, diag s_a) || N(mu_e, diag s_e)]
///  = 1/2 sum_i (s_a/s_e + ln(s_e/s_a) - 1 + (mu_e - mu_a)^2 / s_e)`.
/// Nonnegative, and zero exactly when both distributions agree.
pub fn kl_divergence_diag(mu_a: &[f64], var_a: &[f64], mu_e: &[f64], var_e: &[f64]) -> Result<f64> {
    check_gaussians(mu_a, var_a, mu_e, var_e)?;
    let mut kl = 0.0;
    for i in 0..mu_a.len() {
        let r = var_a[i] / var_e[i];
        let dm = mu_e[i] - mu_a[i];
        // r - 1 - ln r >= 0; ln_1p keeps precision when r is near 1.
        kl += (r - 1.0) - (r - 1.0).ln_1p() + dm * dm / var_e[i];
    }
    Ok(0.5 * kl)
}

/// Regression MNLL of `y_true` under `N(mean, variance + noise_var)`.
pub fn mnll_regression(summary: &PosteriorSummary, y_true: &[f64], noise_var: f64) -> Result<f64> {
    let n = y_true.len();
    if summary.mean.len() != n || summary.variance.len() != n {
        return Err(Error::dim("mnll_regression", n, summary.mean.len()));
    }
    if n == 0 {
        return Err(Error::invalid("MNLL of an empty set"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let v = summary.variance[i] + noise_var;
        if !(v > 0.0) {
            return Err(Error::invalid(format!("predictive variance at {i} is not positive")));
        }
        let r = y_true[i] - summary.mean[i];
        total += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + r * r / (2.0 * v);
    }
    Ok(total / n as f64)
}

/// Classification MNLL: mean of `-ln p_true`, with probabilities clamped
/// at `1e-300`.
pub fn mnll_classification(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if probs.nrows() != labels.len() {
        return Err(Error::dim("mnll_classification", probs.nrows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("MNLL of an empty set"));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l >= probs.ncols() {
            return Err(Error::invalid(format!("label {l} outside the class range")));
        }
        let mut p = probs[(i, l)];
        if p < 1e-300 {
            p = 1e-300;
            clamped += 1;
        }
        total -= p.ln();
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities clamped at 1e-300");
    }
    Ok(total / labels.len() as f64)
}
