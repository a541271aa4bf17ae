//! Seeded random streams and the fast Walsh–Hadamard transform.
//!
//! Every random quantity in the crate is drawn from an [`RngStream`], a
//! `(seed, stream_id)` pair that maps onto an independent ChaCha8 stream.
//! ChaCha is counter based, so a stream reproduces the same draws no matter
//! how many other streams were consumed before it or on which thread.

use std::ops::{Add, Sub};
use std::str::FromStr;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Derives a child seed from `seed` and a salt.
///
/// Used where a component needs a whole family of streams of its own, e.g.
/// one sketch per Maclaurin degree.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(salt);
    rng.next_u64()
}

/// A transform length that is a power of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HadamardDim(usize);

impl HadamardDim {
    pub fn new(d_pad: usize) -> Result<Self> {
        if d_pad == 0 || !d_pad.is_power_of_two() {
            return Err(Error::UnsupportedDimension(format!(
                "Hadamard length {d_pad} is not a power of two"
            )));
        }
        Ok(Self(d_pad))
    }

    /// Smallest power of two that is at least `d` (and at least 1).
    pub fn covering(d: usize) -> Self {
        Self(d.max(1).next_power_of_two())
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// In-place unnormalized Walsh–Hadamard transform.
///
/// Computes `H v` where `H_1 = [1]` and `H_{2m} = [[H_m, H_m], [H_m, -H_m]]`
/// in `O(d log d)` butterflies. Applying it twice multiplies by `d`.
pub fn fwht_inplace<T>(v: &mut [T]) -> Result<()>
where
    T: Copy + Add<Output = T> + Sub<Output = T>,
{
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::UnsupportedDimension(format!(
            "FWHT length {n} is not a power of two"
        )));
    }
    let mut h = 1;
    while h < n {
        for block in v.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
    Ok(())
}

/// Entry `(row, col)` of the unnormalized Hadamard matrix of any
/// power-of-two order: `(-1)^{popcount(row & col)}`.
#[inline]
pub fn hadamard_entry(row: usize, col: usize) -> f64 {
    if (row & col).count_ones().is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn fill_signs<R: Rng>(rng: &mut R, n: usize, mut emit: impl FnMut(u64)) {
    let mut remaining = n;
    while remaining > 0 {
        let take = remaining.min(64);
        let bits = rng.next_u64();
        for b in 0..take {
            emit((bits >> b) & 1);
        }
        remaining -= take;
    }
}

/// `n` i.i.d. uniform draws from `{+1, -1}`.
pub fn sample_rademacher(stream: &RngStream, n: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    rademacher_from(&mut rng, n)
}

pub(crate) fn rademacher_from<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    fill_signs(rng, n, |bit| out.push(if bit == 0 { 1.0 } else { -1.0 }));
    out
}

/// `n` i.i.d. standard normal draws.
pub fn sample_gaussian(stream: &RngStream, n: usize) -> Vec<f64> {
    let mut rng = stream.rng();
    gaussian_from(&mut rng, n)
}

pub(crate) fn gaussian_from<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Complex weight laws with `E[z conj(z)] = 1` and `E[z^2] = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexWeightKind {
    /// Uniform on `{1, -1, i, -i}`.
    RademacherRotated,
    /// `sqrt(1/2) (v + i w)` with independent standard normals `v`, `w`.
    GaussianPair,
    /// `exp(i theta)` with `theta` uniform on `[0, 2 pi)`.
    UnitCircle,
}

impl FromStr for ComplexWeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher_rotated" => Ok(Self::RademacherRotated),
            "gaussian_pair" => Ok(Self::GaussianPair),
            "unit_circle" => Ok(Self::UnitCircle),
            other => Err(Error::config(format!("unknown complex weight kind '{other}'"))),
        }
    }
}

/// `n` i.i.d. complex weights of the given kind.
pub fn sample_complex_weights(
    kind: ComplexWeightKind,
    stream: &RngStream,
    n: usize,
) -> Vec<Complex64> {
    let mut rng = stream.rng();
    complex_from(&mut rng, kind, n)
}

pub(crate) fn complex_from<R: Rng>(
    rng: &mut R,
    kind: ComplexWeightKind,
    n: usize,
) -> Vec<Complex64> {
    match kind {
        ComplexWeightKind::RademacherRotated => {
            const UNITS: [Complex64; 4] = [
                Complex64::new(1.0, 0.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(-1.0, 0.0),
                Complex64::new(0.0, -1.0),
            ];
            let mut out = Vec::with_capacity(n);
            let mut remaining = n;
            while remaining > 0 {
                let take = remaining.min(32);
                let bits = rng.next_u64();
                for b in 0..take {
                    out.push(UNITS[((bits >> (2 * b)) & 3) as usize]);
                }
                remaining -= take;
            }
            out
        }
        ComplexWeightKind::GaussianPair => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            (0..n)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(s * re, s * im)
                })
                .collect()
        }
        ComplexWeightKind::UnitCircle => (0..n)
            .map(|_| {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                Complex64::from_polar(1.0, theta)
            })
            .collect(),
    }
}

/// A uniformly random permutation of `0..d` (zero-based).
pub fn random_permutation(stream: &RngStream, d: usize) -> Vec<usize> {
    let mut rng = stream.rng();
    permutation_from(&mut rng, d)
}

pub(crate) fn permutation_from<R: Rng>(rng: &mut R, d: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(rng);
    perm
}
