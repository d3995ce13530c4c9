//! Drawing a fresh ensemble from an updated mixture.
//!
//! [`gmm_resample`] picks a mode by weight and samples its updated Gaussian.
//! [`emm_resample`] does the shell projection for Epanechnikov modes: the
//! updated Gaussian only supplies a direction relative to the prior mode and
//! the radius is drawn from the likelihood-weighted radial law along that ray.

use std::sync::Arc;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{spd_factor, CholeskyFactor, Ensemble, SpdMatrix};
use crate::error::{check_dim, invalid, Error, Result};
use crate::measurement::MeasurementModel;
use crate::mixture::{MixtureComponent, UpdatedComponent};
use crate::sampling::{sample_gaussian, GridInverseCdf, DEFAULT_GRID_SIZE};

/// Discrete distribution over component indices.
#[derive(Debug, Clone)]
pub struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    /// From log-weights; they need not be normalized.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(invalid("categorical distribution needs at least one weight"));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || log_weights.iter().any(|w| w.is_nan()) {
            return Err(invalid("log-weights must contain a finite maximum and no NaN"));
        }
        let mut acc = 0.0;
        let cumulative = log_weights
            .iter()
            .map(|w| {
                acc += (w - max).exp();
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }
}

/// Index `j` with probability `exp(log_weights[j])`.
pub fn categorical_draw<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    Ok(Categorical::from_log_weights(log_weights)?.draw(rng))
}

/// Prior modes, their updated counterparts and normalized weights, with every
/// covariance factor computed up front.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    prior_means: Vec<DVector<f64>>,
    prior_factors: Vec<Arc<CholeskyFactor>>,
    updated_means: Vec<DVector<f64>>,
    updated_factors: Vec<CholeskyFactor>,
    log_weights: Vec<f64>,
    categorical: Categorical,
    jittered: u64,
    grid_size: usize,
}

impl PosteriorMixture {
    pub fn new(
        prior: &[MixtureComponent],
        updated: &[UpdatedComponent],
        log_weights: &[f64],
    ) -> Result<Self> {
        let prior_factors = prior
            .par_iter()
            .map(|c| spd_factor(&c.cov).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let means = prior.iter().map(|c| c.mean.clone()).collect();
        Self::assemble(means, prior_factors, updated, log_weights)
    }

    /// All prior modes share one covariance, factored once.
    pub fn with_shared_prior(
        prior_means: Vec<DVector<f64>>,
        prior_cov: &SpdMatrix,
        updated: &[UpdatedComponent],
        log_weights: &[f64],
    ) -> Result<Self> {
        let factor = Arc::new(spd_factor(prior_cov)?);
        let factors = vec![factor; prior_means.len()];
        Self::assemble(prior_means, factors, updated, log_weights)
    }

    fn assemble(
        prior_means: Vec<DVector<f64>>,
        prior_factors: Vec<Arc<CholeskyFactor>>,
        updated: &[UpdatedComponent],
        log_weights: &[f64],
    ) -> Result<Self> {
        let len = prior_means.len();
        if len == 0 {
            return Err(invalid("posterior mixture needs at least one component"));
        }
        check_dim(len, updated.len())?;
        check_dim(len, log_weights.len())?;
        let n = prior_means[0].len();
        for (m, u) in prior_means.iter().zip(updated) {
            check_dim(n, m.len())?;
            check_dim(n, u.mean.len())?;
        }
        let updated_factors = updated
            .par_iter()
            .map(|u| spd_factor(&u.cov))
            .collect::<Result<Vec<_>>>()?;
        let mut jittered = updated_factors.iter().filter(|f| f.jitter().is_some()).count() as u64;
        jittered += u64::from(prior_factors[0].jitter().is_some());
        if prior_factors.len() > 1 && !Arc::ptr_eq(&prior_factors[0], &prior_factors[1]) {
            jittered += prior_factors[1..].iter().filter(|f| f.jitter().is_some()).count() as u64;
        }
        Ok(Self {
            categorical: Categorical::from_log_weights(log_weights)?,
            prior_means,
            prior_factors,
            updated_means: updated.iter().map(|u| u.mean.clone()).collect(),
            updated_factors,
            log_weights: log_weights.to_vec(),
            jittered,
            grid_size: DEFAULT_GRID_SIZE,
        })
    }

    /// Node count of the radial inverse-CDF grid (at least 64).
    pub fn with_grid_size(mut self, k: usize) -> Self {
        self.grid_size = k;
        self
    }

    pub fn len(&self) -> usize {
        self.prior_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prior_means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prior_means[0].len()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn prior_mean(&self, j: usize) -> &DVector<f64> {
        &self.prior_means[j]
    }

    pub fn prior_factor(&self, j: usize) -> &CholeskyFactor {
        &self.prior_factors[j]
    }

    pub fn updated_mean(&self, j: usize) -> &DVector<f64> {
        &self.updated_means[j]
    }

    pub fn updated_factor(&self, j: usize) -> &CholeskyFactor {
        &self.updated_factors[j]
    }

    /// Factorizations that needed jitter while building the mixture.
    pub fn jittered_factors(&self) -> u64 {
        self.jittered
    }
}

/// Draws `n_out` particles from the Gaussian mixture of updated modes.
pub fn gmm_resample<R: Rng + ?Sized>(post: &PosteriorMixture, n_out: usize, rng: &mut R) -> Result<Ensemble> {
    let mut cols = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let j = post.categorical.draw(rng);
        cols.push(sample_gaussian(&post.updated_means[j], post.updated_factors[j].lower(), rng)?);
    }
    Ensemble::from_columns(post.dim(), &cols)
}

/// One draw of the shell-projection resampler. The flag is set when the
/// likelihood-weighted radial density had no support on the grid and the
/// likelihood-free radial law was used instead.
pub fn emm_resample_one<R: Rng + ?Sized>(
    post: &PosteriorMixture,
    meas: &MeasurementModel,
    rng: &mut R,
) -> Result<(DVector<f64>, bool)> {
    let n = post.dim();
    check_dim(n, meas.state_dim())?;
    let j = post.categorical.draw(rng);
    let prior_mean = &post.prior_means[j];
    let prior = &post.prior_factors[j];
    let radius = (n as f64 + 4.0).sqrt();
    let s_hat = loop {
        let u = sample_gaussian(&post.updated_means[j], post.updated_factors[j].lower(), rng)?;
        let s = prior.solve_lower(&(u - prior_mean));
        let norm = s.norm();
        if norm > 0.0 && norm.is_finite() {
            break s * (radius / norm);
        }
    };
    // boundary point of the prior mode along ŝ, relative to its mean
    let ray = prior.mul_vec(&s_hat);
    let shape = |z: f64| -> f64 {
        if z >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let radial = if n == 1 { 0.0 } else { (n as f64 - 1.0) * z.ln() };
        radial + (1.0 - z * z).ln()
    };
    let (kappa, fallback) = match GridInverseCdf::build(
        |z| {
            let base = shape(z);
            if base == f64::NEG_INFINITY {
                base
            } else {
                base + meas.ln_likelihood(&(prior_mean + &ray * z))
            }
        },
        post.grid_size,
    ) {
        Ok(grid) => (grid.sample(rng), false),
        Err(Error::ZeroSupport) => (GridInverseCdf::build(shape, post.grid_size)?.sample(rng), true),
        Err(e) => return Err(e),
    };
    Ok((prior_mean + ray * kappa, fallback))
}

/// `n_out` independent draws of [`emm_resample_one`] and the number of
/// radial fallbacks.
pub fn emm_resample<R: Rng + ?Sized>(
    post: &PosteriorMixture,
    meas: &MeasurementModel,
    n_out: usize,
    rng: &mut R,
) -> Result<(Ensemble, u64)> {
    let mut cols = Vec::with_capacity(n_out);
    let mut fallbacks = 0;
    for _ in 0..n_out {
        let (x, fb) = emm_resample_one(post, meas, rng)?;
        fallbacks += u64::from(fb);
        cols.push(x);
    }
    Ok((Ensemble::from_columns(post.dim(), &cols)?, fallbacks))
}
