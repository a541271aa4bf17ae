//! Structured TensorSRHT sketches.
//!
//! Within a block of `d_pad` features the degree-`i` weight vectors are the
//! columns of `D_i H P_pi`: a random diagonal of unit-modulus signs, the
//! unnormalized Hadamard matrix and a random column permutation. The columns
//! are mutually orthogonal, which makes features in the same block
//! negatively correlated. Projections cost one FWHT per block and degree.
//! Blocks are independent; the last block keeps only as many columns as
//! needed to reach `D`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    complex_from, fwht_inplace, hadamard_entry, permutation_from, rademacher_from,
    ComplexWeightKind, HadamardDim, RngStream,
};
use crate::sketches::{FeatureMatrix, Field};

#[derive(Debug, Clone, PartialEq)]
enum Diagonal {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSrhtSketch {
    degree: usize,
    num_features: usize,
    input_dim: usize,
    field: Field,
    seed: u64,
    d_pad: HadamardDim,
    num_blocks: usize,
    /// Indexed by `block * degree + i`.
    diagonals: Vec<Diagonal>,
    /// Indexed by `block * degree + i`.
    permutations: Vec<Vec<usize>>,
}

fn stream_for(seed: u64, block: usize, slot: usize, tag: u64) -> RngStream {
    RngStream::new(seed, ((block as u64) << 32) | ((slot as u64) << 1) | tag)
}

/// Draws the diagonals and permutations for a degree-`p` TensorSRHT with
/// `num_features` outputs on `input_dim`-dimensional inputs.
pub fn build_tensor_srht(
    p: usize,
    num_features: usize,
    input_dim: usize,
    field: Field,
    seed: u64,
) -> Result<TensorSrhtSketch> {
    if p == 0 || num_features == 0 || input_dim == 0 {
        return Err(Error::invalid(format!(
            "TensorSRHT needs p, D, d >= 1 (got p={p}, D={num_features}, d={input_dim})"
        )));
    }
    let d_pad = HadamardDim::covering(input_dim);
    let dp = d_pad.get();
    let num_blocks = num_features.div_ceil(dp);
    let mut diagonals = Vec::with_capacity(num_blocks * p);
    let mut permutations = Vec::with_capacity(num_blocks * p);
    for b in 0..num_blocks {
        for i in 0..p {
            let mut rng = stream_for(seed, b, i, 0).rng();
            diagonals.push(match field {
                Field::Real => Diagonal::Real(rademacher_from(&mut rng, dp)),
                Field::Complex => Diagonal::Complex(complex_from(
                    &mut rng,
                    ComplexWeightKind::RademacherRotated,
                    dp,
                )),
            });
            permutations.push(permutation_from(&mut stream_for(seed, b, i, 1).rng(), dp));
        }
    }
    Ok(TensorSrhtSketch {
        degree: p,
        num_features,
        input_dim,
        field,
        seed,
        d_pad,
        num_blocks,
        diagonals,
        permutations,
    })
}

impl TensorSrhtSketch {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn field(&self) -> Field {
        self.field
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_pad(&self) -> HadamardDim {
        self.d_pad
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Number of columns kept from block `b`.
    pub fn block_width(&self, b: usize) -> usize {
        let dp = self.d_pad.get();
        dp.min(self.num_features - b * dp)
    }

    /// Permutation used for block `b` and degree slot `i`.
    pub fn permutation(&self, b: usize, i: usize) -> &[usize] {
        &self.permutations[b * self.degree + i]
    }

    /// Diagonal used for block `b` and degree slot `i`.
    pub fn diagonal(&self, b: usize, i: usize) -> Vec<Complex64> {
        match &self.diagonals[b * self.degree + i] {
            Diagonal::Real(v) => v.iter().map(|&s| Complex64::new(s, 0.0)).collect(),
            Diagonal::Complex(v) => v.clone(),
        }
    }

    /// Features of one input vector via the FWHT fast path.
    pub fn feature_row(&self, x: &[f64]) -> Result<Vec<Complex64>> {
        if x.len() != self.input_dim {
            return Err(Error::dim("apply_tensor_srht input", self.input_dim, x.len()));
        }
        let dp = self.d_pad.get();
        let scale = 1.0 / (self.num_features as f64).sqrt();
        let mut out = Vec::with_capacity(self.num_features);
        match self.field {
            Field::Real => {
                let mut buf = vec![0.0f64; dp];
                for b in 0..self.num_blocks {
                    let width = self.block_width(b);
                    let mut acc = vec![scale; width];
                    for i in 0..self.degree {
                        let Diagonal::Real(z) = &self.diagonals[b * self.degree + i] else {
                            unreachable!("real sketch holds real diagonals")
                        };
                        buf.iter_mut().for_each(|v| *v = 0.0);
                        for (k, &xk) in x.iter().enumerate() {
                            buf[k] = z[k] * xk;
                        }
                        fwht_inplace(&mut buf)?;
                        let perm = self.permutation(b, i);
                        for (l, a) in acc.iter_mut().enumerate() {
                            *a *= buf[perm[l]];
                        }
                    }
                    out.extend(acc.into_iter().map(|v| Complex64::new(v, 0.0)));
                }
            }
            Field::Complex => {
                let mut buf = vec![Complex64::new(0.0, 0.0); dp];
                for b in 0..self.num_blocks {
                    let width = self.block_width(b);
                    let mut acc = vec![Complex64::new(scale, 0.0); width];
                    for i in 0..self.degree {
                        let Diagonal::Complex(z) = &self.diagonals[b * self.degree + i] else {
                            unreachable!("complex sketch holds complex diagonals")
                        };
                        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                        for (k, &xk) in x.iter().enumerate() {
                            buf[k] = z[k] * xk;
                        }
                        fwht_inplace(&mut buf)?;
                        let perm = self.permutation(b, i);
                        for (l, a) in acc.iter_mut().enumerate() {
                            *a *= buf[perm[l]];
                        }
                    }
                    out.extend(acc);
                }
            }
        }
        Ok(out)
    }
}

/// Applies the sketch to every row of `x`, padding rows with zeros to the
/// Hadamard length internally.
pub fn apply_tensor_srht(sk: &TensorSrhtSketch, x: &DMatrix<f64>) -> Result<FeatureMatrix> {
    if x.ncols() != sk.input_dim {
        return Err(Error::dim("apply_tensor_srht input", sk.input_dim, x.ncols()));
    }
    let rows: Result<Vec<Vec<Complex64>>> = (0..x.nrows())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = x.row(r).iter().copied().collect();
            sk.feature_row(&row)
        })
        .collect();
    let rows = rows?;
    let data = DMatrix::from_fn(rows.len(), sk.num_features, |r, c| rows[r][c]);
    FeatureMatrix::new(data, sk.field == Field::Real)
}

/// Explicit `D_i H P_pi` matrices (size `d_pad x d_pad`) for every block and
/// degree slot, ordered `block * degree + i`. Column `l` is the weight
/// vector of feature `l` in that block.
pub fn weight_matrix_explicit(sk: &TensorSrhtSketch) -> Vec<DMatrix<Complex64>> {
    let dp = sk.d_pad.get();
    let mut out = Vec::with_capacity(sk.num_blocks * sk.degree);
    for b in 0..sk.num_blocks {
        for i in 0..sk.degree {
            let z = sk.diagonal(b, i);
            let perm = sk.permutation(b, i);
            out.push(DMatrix::from_fn(dp, dp, |k, l| z[k] * hadamard_entry(k, perm[l])));
        }
    }
    out
}
