//! Random-feature approximations of dot-product and Gaussian kernels.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: seeded random streams and the fast Walsh–Hadamard transform.
//! - [`sketches`]: unstructured real and complex polynomial sketches and random
//!   Fourier features.
//! - [`tensor_srht`]: structured TensorSRHT sketches applied through the FWHT.
//! - [`variance`]: closed-form variances, the convex surrogate used by the
//!   allocator, and a feature-count bound.
//! - [`maclaurin`]: Maclaurin expansions, random Maclaurin features and the
//!   optimized bias/variance feature allocation.
//! - [`gp`]: Gaussian-process regression and classification in feature space.
//! - [`eval`]: data loading, preprocessing, metrics and experiment reports.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod gp;
pub mod maclaurin;
pub mod numerics;
pub mod sketches;
pub mod stats;
pub mod tensor_srht;
pub mod variance;

pub use error::{Error, Result};
pub use sketches::{Family, FeatureMatrix, Field, SketchSpec};
