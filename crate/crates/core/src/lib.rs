//! Ensemble mixture-model filtering with Epanechnikov kernels.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel_math`]: kernel constants, densities, optimal bandwidths and
//!   kernel efficiency for the Gaussian and Epanechnikov kernels.
//! - [`sampling`]: reproducible random streams, Gaussian/Epanechnikov/Beta
//!   variates and a grid inverse-CDF sampler.
//! - [`ensemble`]: ensemble moments, Cholesky factors with a jitter policy,
//!   covariance localization and inflation.
//! - [`measurement`]: observation operators and realized measurements.
//! - [`mixture`]: per-component EKF/BRUF updates and the three weight schemes.
//! - [`resampling`]: Gaussian-mixture and Epanechnikov-mixture resamplers.
//! - [`filters`]: EnKF, EnGMF, EnEMF-G and EnEMF-U analysis steps.
//! - [`models`]: the n-dimensional banana problem and Lorenz '96.
//! - [`harness`]: seeded Monte-Carlo sweeps, RMSE metrics and CSV output.

pub mod ensemble;
pub mod error;
pub mod filters;
pub mod harness;
pub mod kernel_math;
pub mod measurement;
pub mod mixture;
pub mod models;
pub mod resampling;
pub mod sampling;

pub use error::{Error, Result};
