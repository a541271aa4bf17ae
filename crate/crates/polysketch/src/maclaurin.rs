//! Maclaurin expansions of dot-product kernels and random features built
//! from them.
//!
//! A kernel `k(x, y) = g(x) g(y) sum_n a_n (x^T y)^n` with `a_n >= 0` is
//! approximated by sketching each retained degree separately. The
//! optimized variant chooses the truncation degree and the per-degree
//! feature counts by minimizing an empirical bias-plus-variance objective
//! over a data sample; the random variant samples degrees from a geometric
//! measure.
//!
//! Feature budgets here count the constant (degree 0) column: a budget of
//! `D_total` yields `D_total - 1` sketched features plus one column holding
//! `sqrt(a_0) g(x)`.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, HadamardDim, RngStream};
use crate::sketches::{apply_sketch, build_unstructured_sketch, Family, FeatureMatrix, Field, SketchSpec};
use crate::tensor_srht::{apply_tensor_srht, build_tensor_srht};
use crate::variance::{surrogate_from_terms, PairStats, SketchMoments, VarianceTerms};

/// A dot-product kernel described by its Maclaurin coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `scale * (x^T y + nu)^degree`.
    Polynomial {
        degree: u32,
        nu: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `exp(x^T y / l^2)`.
    Exponential { lengthscale: f64 },
    /// `exp(-||x - y||^2 / (2 l^2))`.
    Gaussian { lengthscale: f64 },
}

fn one() -> f64 {
    1.0
}

fn binomial(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl KernelSpec {
    /// The kernel `amplitude * (1 - ||x - y||^2 / a^2)^p` restricted to the
    /// unit sphere, where it equals
    /// `amplitude * ((1 - 2/a^2) + (2/a^2) x^T y)^p`.
    pub fn unit_sphere_polynomial(degree: u32, a: f64, amplitude: f64) -> Self {
        let s = 2.0 / (a * a);
        KernelSpec::Polynomial {
            degree,
            nu: (1.0 - s) / s,
            scale: amplitude * s.powi(degree as i32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Polynomial { degree, nu, scale } => {
                if degree == 0 {
                    return Err(Error::config("polynomial kernel degree must be at least 1"));
                }
                if !(nu >= 0.0) || !(scale > 0.0) {
                    return Err(Error::config(
                        "polynomial kernel needs nu >= 0 and a positive scale",
                    ));
                }
            }
            KernelSpec::Exponential { lengthscale } | KernelSpec::Gaussian { lengthscale } => {
                if !(lengthscale > 0.0) {
                    return Err(Error::config("length-scale must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Maclaurin coefficient `a_n`.
    pub fn coefficient(&self, n: u32) -> f64 {
        match *self {
            KernelSpec::Polynomial { degree, nu, scale } => {
                if n > degree {
                    0.0
                } else {
                    scale * binomial(degree, n) * nu.powi((degree - n) as i32)
                }
            }
            KernelSpec::Exponential { lengthscale } | KernelSpec::Gaussian { lengthscale } => {
                let l2 = lengthscale * lengthscale;
                (1..=n).fold(1.0, |acc, k| acc / (k as f64 * l2))
            }
        }
    }

    /// Per-point factor `g(x)`; 1 except for the Gaussian kernel.
    pub fn prefactor(&self, x: &[f64]) -> f64 {
        match *self {
            KernelSpec::Gaussian { lengthscale } => {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                (-sq / (2.0 * lengthscale * lengthscale)).exp()
            }
            _ => 1.0,
        }
    }

    pub fn has_prefactor(&self) -> bool {
        matches!(self, KernelSpec::Gaussian { .. })
    }

    /// Exact kernel value.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let t: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        match *self {
            KernelSpec::Polynomial { degree, nu, scale } => scale * (t + nu).powi(degree as i32),
            KernelSpec::Exponential { lengthscale } => (t / (lengthscale * lengthscale)).exp(),
            KernelSpec::Gaussian { lengthscale } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * lengthscale * lengthscale)).exp()
            }
        }
    }

    /// `g(x) g(y) sum_{n <= p} a_n (x^T y)^n`.
    pub fn truncated(&self, x: &[f64], y: &[f64], p: u32) -> f64 {
        let t: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let mut s = 0.0;
        let mut tn = 1.0;
        for n in 0..=p {
            s += self.coefficient(n) * tn;
            tn *= t;
        }
        self.prefactor(x) * self.prefactor(y) * s
    }

    /// Exact kernel matrix between the rows of `a` and `b`.
    pub fn matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ra: Vec<Vec<f64>> = rows_of(a);
        let rb: Vec<Vec<f64>> = rows_of(b);
        DMatrix::from_fn(ra.len(), rb.len(), |i, j| self.eval(&ra[i], &rb[j]))
    }
}

pub(crate) fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|r| x.row(r).iter().copied().collect())
        .collect()
}

/// Which sketch approximates each Maclaurin degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Gaussian,
    Rademacher,
    TensorSrht,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFamily {
    pub sketch: SketchKind,
    pub field: Field,
}

impl FeatureFamily {
    pub fn new(sketch: SketchKind, field: Field) -> Self {
        Self { sketch, field }
    }

    /// Moments of the underlying weight law.
    pub fn moments(&self) -> SketchMoments {
        match self.sketch {
            SketchKind::Gaussian => SketchMoments::for_sketch(Family::Gaussian, self.field),
            SketchKind::Rademacher | SketchKind::TensorSrht => {
                SketchMoments::unit_modulus(self.field)
            }
        }
    }
}

/// Optimized truncation degree and per-degree feature counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub p_star: usize,
    /// `counts[k]` is the number of features of degree `k + 1`.
    pub counts: Vec<usize>,
    pub objective: f64,
}

impl Allocation {
    /// Total output width, including the constant column.
    pub fn total_features(&self) -> usize {
        1 + self.counts.iter().sum::<usize>()
    }
}

/// Data-dependent constants of the allocation objective.
///
/// `var_sums[n]` and `cov_sums[n]` are U-statistic means over distinct
/// sample pairs of the (prefactor-weighted) single-feature variance and
/// same-block covariance of a degree-`n` sketch; `bias[p]` is the mean
/// squared truncation error when all degrees up to `p` are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTables {
    pub m: usize,
    pub p_max: usize,
    /// `a_0 ..= a_{p_max}`.
    pub coefficients: Vec<f64>,
    /// Index 0 unused.
    pub var_sums: Vec<f64>,
    /// Present when the TensorSRHT surrogate is used. Index 0 unused.
    pub cov_sums: Option<Vec<f64>>,
    /// Hadamard length used by the surrogate.
    pub hadamard_dim: usize,
    /// `bias[p]` for `p = 0 ..= p_max`.
    pub bias: Vec<f64>,
}

impl ObjectiveTables {
    /// Tables from explicit constants: the variance term of degree `n` is
    /// `coefficients[n]^2 * var_sums[n] / D_n`.
    pub fn from_constants(coefficients: Vec<f64>, var_sums: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let p_max = coefficients.len().saturating_sub(1);
        if var_sums.len() != p_max + 1 || bias.len() != p_max + 1 {
            return Err(Error::invalid("tables need p_max + 1 entries per array"));
        }
        Ok(Self {
            m: 0,
            p_max,
            coefficients,
            var_sums,
            cov_sums: None,
            hadamard_dim: 0,
            bias,
        })
    }

    pub fn is_active(&self, n: usize) -> bool {
        self.coefficients.get(n).is_some_and(|&a| a > 0.0)
    }

    /// `a_n^2` times the per-degree variance at `d_n` features.
    pub fn degree_variance(&self, n: usize, d_n: usize) -> f64 {
        let a = self.coefficients[n];
        let scaled = match &self.cov_sums {
            None => self.var_sums[n] / d_n as f64,
            Some(cov) => surrogate_from_terms(
                VarianceTerms {
                    v: self.var_sums[n],
                    cov: cov[n],
                },
                d_n as u64,
                self.hadamard_dim as u64,
            ),
        };
        a * a * scaled
    }
}

/// Precomputes the objective constants on a sample (rows of `x_sample`).
///
/// Costs `O(m^2 p_max)`. For TensorSRHT families on one-dimensional inputs
/// the structured formula is undefined and the unstructured Rademacher
/// variance is used instead.
pub fn precompute_objective_tables(
    x_sample: &DMatrix<f64>,
    kernel: &KernelSpec,
    family: FeatureFamily,
    p_max: usize,
) -> Result<ObjectiveTables> {
    kernel.validate()?;
    let m = x_sample.nrows();
    if m < 2 {
        return Err(Error::invalid(format!("objective tables need m >= 2 samples, got {m}")));
    }
    if p_max == 0 {
        return Err(Error::invalid("p_max must be at least 1"));
    }
    let hadamard_dim = HadamardDim::covering(x_sample.ncols()).get();
    let structured = family.sketch == SketchKind::TensorSrht && hadamard_dim >= 2;
    let moments = family.moments();
    let coefficients: Vec<f64> = (0..=p_max).map(|n| kernel.coefficient(n as u32)).collect();
    let rows = rows_of(x_sample);
    let g: Vec<f64> = rows.iter().map(|r| kernel.prefactor(r)).collect();

    // Per-row partial sums over j > i, reduced sequentially so the result
    // does not depend on the thread count.
    let width = 3 * (p_max + 1);
    let partials: Vec<Result<Vec<f64>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = vec![0.0; width];
            for j in (i + 1)..m {
                let s = PairStats::new(&rows[i], &rows[j])?;
                let gg = g[i] * g[j];
                let w = gg * gg;
                let k = kernel.eval(&rows[i], &rows[j]);
                let mut partial = 0.0;
                let mut tn = 1.0;
                for n in 0..=p_max {
                    partial += coefficients[n] * tn;
                    tn *= s.dot;
                    let r = k - gg * partial;
                    acc[2 * (p_max + 1) + n] += r * r;
                    if n == 0 {
                        continue;
                    }
                    if structured {
                        let t = s.tensor_srht_terms(n as u32, hadamard_dim, moments.q)?;
                        acc[n] += w * t.v;
                        acc[(p_max + 1) + n] += w * t.cov;
                    } else {
                        acc[n] += w * s.var_unstructured(n as u32, moments);
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p?) {
            *t += v;
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    let mut var_sums: Vec<f64> = total[..=p_max].iter().map(|v| v / pairs).collect();
    var_sums[0] = 0.0;
    let cov_sums = structured.then(|| {
        let mut c: Vec<f64> = total[(p_max + 1)..2 * (p_max + 1)]
            .iter()
            .map(|v| v / pairs)
            .collect();
        c[0] = 0.0;
        c
    });
    let bias = total[2 * (p_max + 1)..].iter().map(|v| v / pairs).collect();
    Ok(ObjectiveTables {
        m,
        p_max,
        coefficients,
        var_sums,
        cov_sums,
        hadamard_dim,
        bias,
    })
}

/// Variance part of the objective for counts `D_1..D_p` (`counts[k]` is
/// `D_{k+1}`).
pub fn objective_variance(tables: &ObjectiveTables, counts: &[usize]) -> Result<f64> {
    if counts.len() > tables.p_max {
        return Err(Error::invalid(format!(
            "{} degrees requested but tables stop at {}",
            counts.len(),
            tables.p_max
        )));
    }
    let mut total = 0.0;
    for (k, &d_n) in counts.iter().enumerate() {
        let n = k + 1;
        if !tables.is_active(n) {
            continue;
        }
        if d_n == 0 {
            return Err(Error::invalid(format!("active degree {n} has no features")));
        }
        total += tables.degree_variance(n, d_n);
    }
    Ok(total)
}

/// Bias part of the objective when all degrees up to `p` are kept.
pub fn objective_bias(tables: &ObjectiveTables, p: usize) -> Result<f64> {
    tables
        .bias
        .get(p)
        .copied()
        .ok_or_else(|| Error::invalid(format!("degree {p} exceeds tables p_max {}", tables.p_max)))
}

/// Greedy allocation of `budget` features over degrees `1..=p`.
///
/// Every active degree starts with one feature; each further feature goes
/// to the degree whose increment lowers the objective most, ties going to
/// the lowest degree. Optimal because the per-degree terms are convex and
/// decreasing in their count.
pub fn incremental_allocate(p: usize, budget: usize, tables: &ObjectiveTables) -> Result<Vec<usize>> {
    incremental_allocate_traced(p, budget, tables).map(|(c, _)| c)
}

/// [`incremental_allocate`] that also returns the objective variance after
/// the initialization and after each increment.
pub fn incremental_allocate_traced(
    p: usize,
    budget: usize,
    tables: &ObjectiveTables,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if p == 0 || p > tables.p_max {
        return Err(Error::invalid(format!("degree {p} outside 1..={}", tables.p_max)));
    }
    let active: Vec<usize> = (1..=p).filter(|&n| tables.is_active(n)).collect();
    if budget < active.len() {
        return Err(Error::invalid(format!(
            "budget {budget} is below the {} active degrees",
            active.len()
        )));
    }
    if active.is_empty() && budget > 0 {
        return Err(Error::invalid(format!(
            "no active degree in 1..={p} can take the budget of {budget}"
        )));
    }
    let mut counts = vec![0usize; p];
    for &n in &active {
        counts[n - 1] = 1;
    }
    let mut current: Vec<f64> = (0..=p)
        .map(|n| if tables.is_active(n) && n > 0 { tables.degree_variance(n, 1) } else { 0.0 })
        .collect();
    let mut trace = vec![current.iter().sum()];
    for _ in active.len()..budget {
        let mut best: Option<(usize, f64, f64)> = None;
        for &n in &active {
            let next = tables.degree_variance(n, counts[n - 1] + 1);
            let gain = current[n] - next;
            if best.is_none_or(|(_, g, _)| gain > g) {
                best = Some((n, gain, next));
            }
        }
        let (n, _, next) = best.expect("active degrees are nonempty here");
        counts[n - 1] += 1;
        current[n] = next;
        trace.push(current.iter().sum());
    }
    Ok((counts, trace))
}

/// Runs [`incremental_allocate`] for every `p` in `p_min..=p_max` and keeps
/// the strict minimizer of bias plus variance (ties go to the smaller `p`).
///
/// `d_total` includes the constant column, so `d_total - 1` features are
/// distributed. Degrees whose active count exceeds that budget are skipped.
pub fn extended_allocate(
    p_min: usize,
    p_max: usize,
    d_total: usize,
    tables: &ObjectiveTables,
) -> Result<Allocation> {
    if p_min == 0 || p_min > p_max {
        return Err(Error::invalid(format!("invalid degree range [{p_min}, {p_max}]")));
    }
    if p_max > tables.p_max {
        return Err(Error::invalid(format!(
            "p_max {p_max} exceeds the tables' {}",
            tables.p_max
        )));
    }
    let budget = d_total
        .checked_sub(1)
        .ok_or_else(|| Error::invalid("feature budget must be at least 1"))?;
    let mut best: Option<Allocation> = None;
    for p in p_min..=p_max {
        let active = (1..=p).filter(|&n| tables.is_active(n)).count();
        if active > budget || (active == 0 && budget > 0) {
            continue;
        }
        let counts = incremental_allocate(p, budget, tables)?;
        let objective = tables.bias[p] + objective_variance(tables, &counts)?;
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(Allocation {
                p_star: p,
                counts,
                objective,
            });
        }
    }
    best.ok_or_else(|| {
        Error::invalid(format!(
            "feature budget {d_total} cannot cover the active degrees of any p in [{p_min}, {p_max}]"
        ))
    })
}

fn sketch_block(
    n: usize,
    count: usize,
    family: FeatureFamily,
    seed: u64,
    x: &DMatrix<f64>,
) -> Result<FeatureMatrix> {
    let seed = derive_seed(seed, n as u64);
    match family.sketch {
        SketchKind::TensorSrht => {
            let sk = build_tensor_srht(n, count, x.ncols(), family.field, seed)?;
            apply_tensor_srht(&sk, x)
        }
        SketchKind::Gaussian | SketchKind::Rademacher => {
            let fam = if family.sketch == SketchKind::Gaussian {
                Family::Gaussian
            } else {
                Family::Rademacher
            };
            let sk = build_unstructured_sketch(SketchSpec {
                family: fam,
                field: family.field,
                degree: n,
                num_features: count,
                input_dim: x.ncols(),
                seed,
            })?;
            apply_sketch(&sk, x)
        }
    }
}

/// Concatenates `sqrt(a_0)` with `sqrt(w_n) Phi_n(x)` for every degree with
/// `counts[n-1] > 0`, then multiplies each row by the kernel prefactor.
fn assemble_weighted(
    kernel: &KernelSpec,
    counts: &[usize],
    weights: &[f64],
    family: FeatureFamily,
    seed: u64,
    x: &DMatrix<f64>,
) -> Result<FeatureMatrix> {
    let n_rows = x.nrows();
    let a0 = kernel.coefficient(0);
    let constant = DMatrix::from_element(n_rows, 1, a0.sqrt());
    let mut blocks = vec![FeatureMatrix::from_real(&constant)];
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mut block = sketch_block(k + 1, count, family, seed, x)?;
        block.scale(weights[k].sqrt());
        blocks.push(block);
    }
    let mut out = FeatureMatrix::hstack(&blocks, n_rows)?;
    if family.field == Field::Complex {
        // The constant column is real but the map as a whole is complex.
        out = FeatureMatrix::new(out.into_matrix(), false)?;
    }
    if kernel.has_prefactor() {
        let g: Vec<f64> = rows_of(x).iter().map(|r| kernel.prefactor(r)).collect();
        out.scale_rows(&g)?;
    }
    Ok(out)
}

/// Builds the optimized Maclaurin feature map for an allocation.
pub fn assemble_features(
    kernel: &KernelSpec,
    alloc: &Allocation,
    family: FeatureFamily,
    seed: u64,
    x: &DMatrix<f64>,
) -> Result<FeatureMatrix> {
    kernel.validate()?;
    if alloc.counts.len() != alloc.p_star {
        return Err(Error::invalid("allocation counts must have p_star entries"));
    }
    for (k, &c) in alloc.counts.iter().enumerate() {
        let active = kernel.coefficient(k as u32 + 1) > 0.0;
        if active != (c > 0) {
            return Err(Error::invalid(format!(
                "degree {} has {c} features but coefficient activity {active}",
                k + 1
            )));
        }
    }
    let weights: Vec<f64> = (1..=alloc.p_star).map(|n| kernel.coefficient(n as u32)).collect();
    assemble_weighted(kernel, &alloc.counts, &weights, family, seed, x)
}

/// Degrees drawn for random Maclaurin features.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMaclaurinDraw {
    /// `counts[k]` features of degree `k + 1`.
    pub counts: Vec<usize>,
    /// Truncated, renormalized sampling measure; `measure[k] = mu(k + 1)`.
    pub measure: Vec<f64>,
}

impl RandomMaclaurinDraw {
    /// Importance weight `a_n / mu(n)`.
    pub fn importance_weight(&self, n: usize, a_n: f64) -> f64 {
        a_n / self.measure[n - 1]
    }
}

/// Draws `d_total` degrees i.i.d. from `mu(n) ∝ c^{-(n+1)}` on `1..=p_max`.
pub fn random_maclaurin_assign(
    d_total: usize,
    p_max: usize,
    c: f64,
    stream: &RngStream,
) -> Result<RandomMaclaurinDraw> {
    if !(c > 1.0) {
        return Err(Error::invalid(format!("measure base c must exceed 1, got {c}")));
    }
    if p_max == 0 {
        return Err(Error::invalid("p_max must be at least 1"));
    }
    let raw: Vec<f64> = (1..=p_max).map(|n| c.powi(-(n as i32 + 1))).collect();
    let z: f64 = raw.iter().sum();
    let measure: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let dist = WeightedIndex::new(&measure).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream.rng();
    let mut counts = vec![0usize; p_max];
    for _ in 0..d_total {
        counts[dist.sample(&mut rng)] += 1;
    }
    Ok(RandomMaclaurinDraw { counts, measure })
}

/// Random Maclaurin feature map with `d_total` columns (one constant column
/// plus `d_total - 1` sketched features with randomly drawn degrees).
pub fn random_maclaurin_features(
    kernel: &KernelSpec,
    d_total: usize,
    p_max: usize,
    c: f64,
    family: FeatureFamily,
    seed: u64,
    x: &DMatrix<f64>,
) -> Result<(FeatureMatrix, RandomMaclaurinDraw)> {
    kernel.validate()?;
    let budget = d_total
        .checked_sub(1)
        .ok_or_else(|| Error::invalid("feature budget must be at least 1"))?;
    let draw = random_maclaurin_assign(budget, p_max, c, &RngStream::new(seed, u64::MAX))?;
    let weights: Vec<f64> = draw
        .counts
        .iter()
        .enumerate()
        .map(|(k, &count)| {
            let n = k + 1;
            draw.importance_weight(n, kernel.coefficient(n as u32)) * count as f64 / budget as f64
        })
        .collect();
    let features = assemble_weighted(kernel, &draw.counts, &weights, family, seed, x)?;
    Ok((features, draw))
}

/// `E[k_hat(x, x)]` for a map that keeps degrees `0..=p`.
pub fn expected_self_kernel(kernel: &KernelSpec, p: usize, x: &[f64]) -> f64 {
    kernel.truncated(x, x, p as u32)
}

/// Nonnegative gap `k(x, x) - E[k_hat(x, x)]` left by truncating at `p`.
pub fn bias_correction(kernel: &KernelSpec, p: usize, x: &[f64]) -> f64 {
    (kernel.eval(x, x) - expected_self_kernel(kernel, p, x)).max(0.0)
}
