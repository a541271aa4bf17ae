//! Unstructured polynomial sketches, exact dot-product kernels and random
//! Fourier features.
//!
//! A degree-`p` sketch with `D` features maps `x` to
//! `Phi(x)_l = D^{-1/2} prod_{i=1..p} <w_{i,l}, x>` and approximates the
//! homogeneous polynomial kernel by `Phi(x)^T conj(Phi(y))`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{complex_from, gaussian_from, rademacher_from, ComplexWeightKind, RngStream};

/// Distribution of the individual weight entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Rademacher,
}

/// Whether weights (and therefore features) are real or complex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Real,
    Complex,
}

/// Declarative description of an unstructured polynomial sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub family: Family,
    pub field: Field,
    pub degree: usize,
    pub num_features: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl SketchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 {
            return Err(Error::invalid("sketch degree must be at least 1"));
        }
        if self.num_features == 0 {
            return Err(Error::invalid("sketch needs at least one feature"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be at least 1"));
        }
        Ok(())
    }
}

/// Row-major block of (possibly complex) features, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: DMatrix<Complex64>,
    is_real: bool,
}

impl FeatureMatrix {
    /// Wraps a complex matrix. With `is_real` set every imaginary part must
    /// be exactly zero.
    pub fn new(data: DMatrix<Complex64>, is_real: bool) -> Result<Self> {
        if is_real && data.iter().any(|z| z.im != 0.0) {
            return Err(Error::invalid(
                "feature matrix flagged real has nonzero imaginary parts",
            ));
        }
        Ok(Self { data, is_real })
    }

    pub fn from_real(data: &DMatrix<f64>) -> Self {
        Self {
            data: data.map(|v| Complex64::new(v, 0.0)),
            is_real: true,
        }
    }

    fn from_rows(rows: Vec<Vec<Complex64>>, cols: usize, is_real: bool) -> Self {
        let n = rows.len();
        let data = DMatrix::from_fn(n, cols, |r, c| rows[r][c]);
        Self { data, is_real }
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_real(&self) -> bool {
        self.is_real
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.data
    }

    pub fn row(&self, i: usize) -> Vec<Complex64> {
        self.data.row(i).iter().copied().collect()
    }

    /// Approximate kernel matrix `Phi_self Phi_other^H`.
    pub fn gram(&self, other: &FeatureMatrix) -> Result<DMatrix<Complex64>> {
        if self.cols() != other.cols() {
            return Err(Error::dim("gram", self.cols(), other.cols()));
        }
        Ok(&self.data * other.data.adjoint())
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn scale_rows(&mut self, scales: &[f64]) -> Result<()> {
        if scales.len() != self.rows() {
            return Err(Error::dim("scale_rows", self.rows(), scales.len()));
        }
        for (i, &s) in scales.iter().enumerate() {
            self.data.row_mut(i).iter_mut().for_each(|z| *z *= s);
        }
        Ok(())
    }

    /// Multiplies every entry by `s`.
    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|z| *z *= s);
    }

    /// Horizontal concatenation. The result is real only if every block is.
    pub fn hstack(blocks: &[FeatureMatrix], rows: usize) -> Result<FeatureMatrix> {
        let cols: usize = blocks.iter().map(|b| b.cols()).sum();
        let mut data = DMatrix::zeros(rows, cols);
        let mut offset = 0;
        for b in blocks {
            if b.rows() != rows {
                return Err(Error::dim("hstack", rows, b.rows()));
            }
            data.columns_mut(offset, b.cols()).copy_from(&b.data);
            offset += b.cols();
        }
        Ok(FeatureMatrix {
            data,
            is_real: blocks.iter().all(|b| b.is_real),
        })
    }
}

/// `(x^T y + nu)^p`.
pub fn exact_polynomial_kernel(x: &[f64], y: &[f64], p: u32, nu: f64) -> Result<f64> {
    Ok((dot(x, y)? + nu).powi(p as i32))
}

/// Appends `sqrt(nu)` so that the homogeneous kernel of the augmented
/// vectors equals the inhomogeneous kernel of the originals.
pub fn augment_inhomogeneous(x: &[f64], nu: f64) -> Result<Vec<f64>> {
    if nu < 0.0 || nu.is_nan() {
        return Err(Error::invalid(format!("offset nu must be nonnegative, got {nu}")));
    }
    let mut out = Vec::with_capacity(x.len() + 1);
    out.extend_from_slice(x);
    out.push(nu.sqrt());
    Ok(out)
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim("dot product", x.len(), y.len()));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a * b).sum())
}

/// Hermitian inner product `sum_k a_k conj(b_k)`.
pub fn approx_kernel(phi_x: &[Complex64], phi_y: &[Complex64]) -> Result<Complex64> {
    if phi_x.len() != phi_y.len() {
        return Err(Error::dim("approx_kernel", phi_x.len(), phi_y.len()));
    }
    Ok(phi_x.iter().zip(phi_y).map(|(a, b)| a * b.conj()).sum())
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Materialized i.i.d. weight vectors of an unstructured sketch.
///
/// Weight `w_{i,l}` for degree slot `i` and feature `l` comes from its own
/// random stream, so sketches that share a seed but differ in `D` agree on
/// the common features.
#[derive(Debug, Clone, PartialEq)]
pub struct UnstructuredSketch {
    spec: SketchSpec,
    weights: Weights,
}

pub(crate) fn weight_stream(seed: u64, degree_slot: usize, feature: usize) -> RngStream {
    RngStream::new(seed, ((degree_slot as u64) << 40) | feature as u64)
}

/// Draws all `p * D` weight vectors for `spec`.
pub fn build_unstructured_sketch(spec: SketchSpec) -> Result<UnstructuredSketch> {
    spec.validate()?;
    let SketchSpec {
        degree: p,
        num_features: big_d,
        input_dim: d,
        seed,
        ..
    } = spec;
    let weights = match spec.field {
        Field::Real => {
            let mut w = Vec::with_capacity(p * big_d * d);
            for i in 0..p {
                for l in 0..big_d {
                    let mut rng = weight_stream(seed, i, l).rng();
                    match spec.family {
                        Family::Rademacher => w.extend(rademacher_from(&mut rng, d)),
                        Family::Gaussian => w.extend(gaussian_from(&mut rng, d)),
                    }
                }
            }
            Weights::Real(w)
        }
        Field::Complex => {
            let kind = match spec.family {
                Family::Rademacher => ComplexWeightKind::RademacherRotated,
                Family::Gaussian => ComplexWeightKind::GaussianPair,
            };
            let mut w = Vec::with_capacity(p * big_d * d);
            for i in 0..p {
                for l in 0..big_d {
                    let mut rng = weight_stream(seed, i, l).rng();
                    w.extend(complex_from(&mut rng, kind, d));
                }
            }
            Weights::Complex(w)
        }
    };
    Ok(UnstructuredSketch { spec, weights })
}

impl UnstructuredSketch {
    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    /// Weight vector `w_{i,l}` as complex numbers.
    pub fn weight(&self, degree_slot: usize, feature: usize) -> Vec<Complex64> {
        let d = self.spec.input_dim;
        let start = (degree_slot * self.spec.num_features + feature) * d;
        match &self.weights {
            Weights::Real(w) => w[start..start + d]
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .collect(),
            Weights::Complex(w) => w[start..start + d].to_vec(),
        }
    }

    /// Features of a single input vector.
    pub fn feature_row(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        let d = self.spec.input_dim;
        if x.len() != d {
            return Err(Error::dim("apply_sketch input", d, x.len()));
        }
        let p = self.spec.degree;
        let big_d = self.spec.num_features;
        let scale = 1.0 / (big_d as f64).sqrt();
        let out = match &self.weights {
            Weights::Real(w) => (0..big_d)
                .map(|l| {
                    let mut prod = scale;
                    for i in 0..p {
                        let start = (i * big_d + l) * d;
                        prod *= w[start..start + d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                    Complex64::new(prod, 0.0)
                })
                .collect(),
            Weights::Complex(w) => (0..big_d)
                .map(|l| {
                    let mut prod = Complex64::new(scale, 0.0);
                    for i in 0..p {
                        let start = (i * big_d + l) * d;
                        prod *= w[start..start + d]
                            .iter()
                            .zip(x)
                            .map(|(a, &b)| a * b)
                            .sum::<Complex64>();
                    }
                    prod
                })
                .collect(),
        };
        Ok(out)
    }
}

/// Applies the sketch to every row of `x` (an `N x d` matrix).
pub fn apply_sketch(sk: &UnstructuredSketch, x: &DMatrix<f64>) -> Result<FeatureMatrix> {
    if x.ncols() != sk.spec.input_dim {
        return Err(Error::dim("apply_sketch input", sk.spec.input_dim, x.ncols()));
    }
    let rows: Result<Vec<Vec<Complex64>>> = (0..x.nrows())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            sk.feature_row(&row)
        })
        .collect();
    Ok(FeatureMatrix::from_rows(
        rows?,
        sk.spec.num_features,
        sk.spec.field == Field::Real,
    ))
}

/// Random Fourier features for the Gaussian kernel
/// `exp(-||x - y||^2 / (2 l^2))`.
///
/// The real variant uses `D/2` frequencies and stacks cosines then sines
/// with scale `sqrt(2/D)`; the complex variant uses `D` frequencies and
/// phases `exp(i w^T x) / sqrt(D)`.
pub fn rff_features(
    lengthscale: f64,
    num_features: usize,
    input_dim: usize,
    field: Field,
    seed: u64,
    x: &DMatrix<f64>,
) -> Result<FeatureMatrix> {
    if !(lengthscale > 0.0) {
        return Err(Error::invalid("length-scale must be positive"));
    }
    if num_features == 0 {
        return Err(Error::invalid("RFF needs at least one feature"));
    }
    if field == Field::Real && num_features % 2 == 1 {
        return Err(Error::invalid(format!(
            "real RFF needs an even feature count, got {num_features}"
        )));
    }
    if x.ncols() != input_dim {
        return Err(Error::dim("rff input", input_dim, x.ncols()));
    }
    let n_freq = match field {
        Field::Real => num_features / 2,
        Field::Complex => num_features,
    };
    let freqs: Vec<Vec<f64>> = (0..n_freq)
        .map(|j| {
            gaussian_from(&mut RngStream::new(seed, j as u64).rng(), input_dim)
                .into_iter()
                .map(|v| v / lengthscale)
                .collect()
        })
        .collect();
    let rows: Vec<Vec<Complex64>> = (0..x.nrows())
        .into_par_iter()
        .map(|r| {
            let proj: Vec<f64> = freqs
                .iter()
                .map(|w| w.iter().zip(x.row(r).iter()).map(|(a, b)| a * b).sum())
                .collect();
            match field {
                Field::Real => {
                    let s = (2.0 / num_features as f64).sqrt();
                    proj.iter()
                        .map(|t| Complex64::new(s * t.cos(), 0.0))
                        .chain(proj.iter().map(|t| Complex64::new(s * t.sin(), 0.0)))
                        .collect()
                }
                Field::Complex => {
                    let s = (1.0 / num_features as f64).sqrt();
                    proj.iter().map(|&t| Complex64::from_polar(s, t)).collect()
                }
            }
        })
        .collect();
    Ok(FeatureMatrix::from_rows(rows, num_features, field == Field::Real))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: Family, field: Field, p: usize, big_d: usize, d: usize, seed: u64) -> SketchSpec {
        SketchSpec {
            family,
            field,
            degree: p,
            num_features: big_d,
            input_dim: d,
            seed,
        }
    }

    #[test]
    fn exact_kernel_examples() {
        assert_eq!(exact_polynomial_kernel(&[1.0, 0.0], &[0.0, 1.0], 3, 0.0).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((exact_polynomial_kernel(&[h, h], &[h, h], 2, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(exact_polynomial_kernel(&[1.0, 2.0], &[3.0, 4.0], 2, 1.0).unwrap(), 144.0);
        assert!(exact_polynomial_kernel(&[1.0], &[1.0, 2.0], 2, 0.0).is_err());
    }

    #[test]
    fn augmentation() {
        assert_eq!(augment_inhomogeneous(&[3.0, 1.0], 0.0).unwrap(), vec![3.0, 1.0, 0.0]);
        assert_eq!(augment_inhomogeneous(&[1.0], 4.0).unwrap(), vec![1.0, 2.0]);
        assert!(augment_inhomogeneous(&[1.0], -1.0).is_err());
    }

    #[test]
    fn weight_supports() {
        let real = build_unstructured_sketch(spec(Family::Rademacher, Field::Real, 3, 20, 5, 1)).unwrap();
        let cplx = build_unstructured_sketch(spec(Family::Rademacher, Field::Complex, 3, 20, 5, 1)).unwrap();
        let units = [
            Complex64::new(1.0, 0.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(0.0, -1.0),
        ];
        for i in 0..3 {
            for l in 0..20 {
                assert!(real.weight(i, l).iter().all(|z| z.im == 0.0 && z.re.abs() == 1.0));
                assert!(cplx.weight(i, l).iter().all(|z| units.contains(z)));
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let s = spec(Family::Gaussian, Field::Complex, 2, 7, 3, 42);
        assert_eq!(build_unstructured_sketch(s).unwrap(), build_unstructured_sketch(s).unwrap());
    }

    #[test]
    fn one_dimensional_rademacher_is_exact() {
        let sk = build_unstructured_sketch(spec(Family::Rademacher, Field::Real, 1, 1, 1, 3)).unwrap();
        let fx = sk.feature_row(&[1.7]).unwrap();
        let fy = sk.feature_row(&[-0.4]).unwrap();
        assert_eq!(approx_kernel(&fx, &fy).unwrap().re, 1.7 * -0.4);
    }

    #[test]
    fn empty_input_gives_empty_rows() {
        let sk = build_unstructured_sketch(spec(Family::Gaussian, Field::Real, 2, 4, 3, 0)).unwrap();
        let f = apply_sketch(&sk, &DMatrix::zeros(0, 3)).unwrap();
        assert_eq!((f.rows(), f.cols()), (0, 4));
        assert!(apply_sketch(&sk, &DMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn zero_features_rejected() {
        assert!(build_unstructured_sketch(spec(Family::Gaussian, Field::Real, 2, 0, 3, 0)).is_err());
    }

    #[test]
    fn real_sketch_self_kernel_nonnegative() {
        let sk = build_unstructured_sketch(spec(Family::Gaussian, Field::Real, 3, 16, 4, 8)).unwrap();
        let f = sk.feature_row(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        let k = approx_kernel(&f, &f).unwrap();
        assert!(k.re >= 0.0);
        assert_eq!(k.im, 0.0);
    }

    #[test]
    fn rff_shapes_and_norms() {
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -1.0, 0.0, 2.0]);
        let real = rff_features(0.7, 10, 3, Field::Real, 5, &x).unwrap();
        assert!(real.is_real());
        for r in 0..2 {
            let row = real.row(r);
            assert!((approx_kernel(&row, &row).unwrap().re - 1.0).abs() < 1e-12);
        }
        let cplx = rff_features(0.7, 9, 3, Field::Complex, 5, &x).unwrap();
        for z in cplx.matrix().iter() {
            assert!((z.norm() - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(rff_features(0.7, 9, 3, Field::Real, 5, &x).is_err());
    }
}
