//! Data fission and data thinning for Gaussian, Poisson and
//! negative-binomial data, marginally or per mixture component, with the
//! covariance and Type I error formulas that describe what goes wrong when
//! the scale parameter is misspecified, and a seeded Monte Carlo harness
//! for post-clustering inference experiments.
//!
//! Labels are 0-based (`0..G`) everywhere in the library; files written by
//! [`io`] use 1-based labels.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod error;
pub mod rng;
pub mod special;
pub mod linalg;
pub mod samplers;
pub mod decompose;
pub mod estimate;
pub mod cluster;
pub mod stattest;
pub mod theory;
pub mod harness;
pub mod io;

pub use error::{Error, ErrorClass, Result};
pub use linalg::CovMatrix;
pub use rng::Seed;
pub use samplers::{GaussianComponent, LabeledSample, MixtureSpec, NbComponent, SampleData};
