//! Benchmark problems: the banana range-only inference problem and Lorenz '96
//! with paired-magnitude measurements.

use std::sync::atomic::{AtomicU64, Ordering};
use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::ensemble::{CholeskyFactor, Ensemble, SpdMatrix};
use crate::error::{check_dim, invalid, Result};
use crate::measurement::{MeasurementModel, ObservationOperator};
use crate::sampling::{sample_epanechnikov, sample_gaussian, standard_normal_vector};

pub const BANANA_MEAN: f64 = -2.5;
pub const BANANA_OBSERVATION: f64 = 1.0;
pub const BANANA_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Gaussian,
    Epanechnikov,
}

/// Symmetric tridiagonal matrix with constant diagonal and off-diagonal.
pub fn tridiagonal(n: usize, diag: f64, off: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            diag
        } else if i.abs_diff(j) == 1 {
            off
        } else {
            0.0
        }
    })
}

/// Prior of the banana problem: mean `(−2.5, 0, …, 0)`, tridiagonal
/// covariance with unit diagonal and 0.5 off-diagonals.
#[derive(Debug, Clone)]
pub struct BananaProblem {
    pub kind: PriorKind,
    mean: DVector<f64>,
    cov: SpdMatrix,
    factor: CholeskyFactor,
}

pub fn banana_prior(n: usize, kind: PriorKind) -> Result<BananaProblem> {
    if n == 0 {
        return Err(invalid("banana dimension must be at least 1"));
    }
    let mut mean = DVector::zeros(n);
    mean[0] = BANANA_MEAN;
    let cov = SpdMatrix::new(tridiagonal(n, 1.0, 0.5))?;
    let factor = CholeskyFactor::strict(&cov)?;
    Ok(BananaProblem {
        kind,
        mean,
        cov,
        factor,
    })
}

impl BananaProblem {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &SpdMatrix {
        &self.cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        match self.kind {
            PriorKind::Gaussian => sample_gaussian(&self.mean, self.factor.lower(), rng),
            PriorKind::Epanechnikov => sample_epanechnikov(&self.mean, self.factor.lower(), rng),
        }
    }

    /// Approximate draw from the posterior given `meas`, by elliptical slice
    /// sampling started from a prior draw. An Epanechnikov prior is handled by
    /// folding its ratio to the same-moment Gaussian into the likelihood.
    pub fn sample_posterior<R: Rng + ?Sized>(
        &self,
        meas: &MeasurementModel,
        iterations: usize,
        rng: &mut R,
    ) -> Result<DVector<f64>> {
        check_dim(self.dim(), meas.state_dim())?;
        let n = self.dim() as f64;
        let target = |x: &DVector<f64>| {
            let ll = meas.ln_likelihood(x);
            match self.kind {
                PriorKind::Gaussian => ll,
                PriorKind::Epanechnikov => {
                    let r2 = self.factor.mahalanobis_sq(&(x - &self.mean));
                    if r2 >= n + 4.0 {
                        f64::NEG_INFINITY
                    } else {
                        ll + (n + 4.0 - r2).ln() + 0.5 * r2
                    }
                }
            }
        };
        let mut x = self.sample(rng)?;
        let mut current = target(&x);
        let zero = DVector::zeros(self.dim());
        for _ in 0..iterations {
            let nu = sample_gaussian(&zero, self.factor.lower(), rng)?;
            let threshold = current + rng.random::<f64>().ln();
            let mut theta = rng.random_range(0.0..TAU);
            let (mut lo, mut hi) = (theta - TAU, theta);
            let offset = &x - &self.mean;
            loop {
                let proposal = &self.mean + &offset * theta.cos() + &nu * theta.sin();
                let value = target(&proposal);
                if value > threshold {
                    x = proposal;
                    current = value;
                    break;
                }
                if theta < 0.0 {
                    lo = theta;
                } else {
                    hi = theta;
                }
                // the bracket always contains theta = 0, the current state
                if hi - lo < 1e-12 {
                    break;
                }
                theta = rng.random_range(lo..hi);
            }
        }
        Ok(x)
    }

    pub fn sample_ensemble<R: Rng + ?Sized>(&self, n_particles: usize, rng: &mut R) -> Result<Ensemble> {
        let cols = (0..n_particles)
            .map(|_| self.sample(rng))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::from_columns(self.dim(), &cols)
    }
}

/// `h(x) = ‖x‖`. The Jacobian at the origin is a zero row and is counted.
#[derive(Debug, Default)]
pub struct NormOperator {
    n: usize,
    singular: AtomicU64,
}

impl NormOperator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            singular: AtomicU64::new(0),
        }
    }
}

impl ObservationOperator for NormOperator {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x.norm())
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let r = x.norm();
        if r == 0.0 {
            self.singular.fetch_add(1, Ordering::Relaxed);
            return DMatrix::zeros(1, self.n);
        }
        DMatrix::from_fn(1, self.n, |_, j| x[j] / r)
    }

    fn singular_jacobians(&self) -> u64 {
        self.singular.load(Ordering::Relaxed)
    }
}

/// Range measurement `y = 1` with noise variance `0.01`.
pub fn banana_measurement(n: usize) -> Result<MeasurementModel> {
    if n == 0 {
        return Err(invalid("banana dimension must be at least 1"));
    }
    MeasurementModel::new(
        Arc::new(NormOperator::new(n)),
        SpdMatrix::from_diagonal(&[BANANA_NOISE])?,
        DVector::from_element(1, BANANA_OBSERVATION),
    )
}

/// Lorenz '96 on a ring, integrated with fixed-step RK4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96 {
    pub n: usize,
    pub forcing: f64,
    pub substep: f64,
    pub window: f64,
}

impl Default for Lorenz96 {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
            substep: 0.05,
            window: 0.2,
        }
    }
}

impl Lorenz96 {
    /// `dx_k/dt = (x_{k+1} − x_{k−2}) x_{k−1} − x_k + F` with cyclic indices.
    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        DVector::from_fn(n, |k, _| {
            let km1 = (k + n - 1) % n;
            let km2 = (k + n - 2) % n;
            let kp1 = (k + 1) % n;
            -x[km1] * (x[km2] - x[kp1]) - x[k] + self.forcing
        })
    }

    /// Integrates for `duration` in RK4 steps of `substep`, which must divide it.
    pub fn propagate_with(&self, x: &DVector<f64>, duration: f64, substep: f64) -> Result<DVector<f64>> {
        if !(duration > 0.0) || !(substep > 0.0) {
            return Err(invalid("duration and substep must be positive"));
        }
        let ratio = duration / substep;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(invalid(format!("substep {substep} does not divide duration {duration}")));
        }
        let mut x = x.clone();
        for _ in 0..steps as usize {
            let k1 = self.rhs(&x);
            let k2 = self.rhs(&(&x + &k1 * (0.5 * substep)));
            let k3 = self.rhs(&(&x + &k2 * (0.5 * substep)));
            let k4 = self.rhs(&(&x + &k3 * substep));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (substep / 6.0);
        }
        Ok(x)
    }

    pub fn propagate(&self, x: &DVector<f64>, duration: f64) -> Result<DVector<f64>> {
        self.propagate_with(x, duration, self.substep)
    }

    /// One assimilation window.
    pub fn step_window(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.propagate(x, self.window)
    }

    pub fn propagate_ensemble(&self, ens: &Ensemble, duration: f64) -> Result<Ensemble> {
        let cols = ens
            .members()
            .map(|x| self.propagate(&x, duration))
            .collect::<Result<Vec<_>>>()?;
        Ensemble::from_columns(ens.dim(), &cols)
    }

    /// Truth after integrating `F·1 + 10⁻³ ξ` for `spinup` time units.
    pub fn spun_up_truth<R: Rng + ?Sized>(&self, spinup: f64, rng: &mut R) -> Result<DVector<f64>> {
        let start = DVector::from_element(self.n, self.forcing) + standard_normal_vector(self.n, rng) * 1e-3;
        self.propagate(&start, spinup)
    }

    /// `truth + 𝒩(0, I)` members.
    pub fn initial_ensemble<R: Rng + ?Sized>(
        &self,
        truth: &DVector<f64>,
        n_particles: usize,
        rng: &mut R,
    ) -> Result<Ensemble> {
        if n_particles < 2 {
            return Err(invalid("initial ensemble needs at least 2 particles"));
        }
        check_dim(self.n, truth.len())?;
        let cols: Vec<_> = (0..n_particles)
            .map(|_| truth + standard_normal_vector(self.n, rng))
            .collect();
        Ensemble::from_columns(self.n, &cols)
    }

    /// Both of the above from one stream.
    pub fn truth_and_initial_ensemble<R: Rng + ?Sized>(
        &self,
        n_particles: usize,
        spinup: f64,
        rng: &mut R,
    ) -> Result<(DVector<f64>, Ensemble)> {
        if n_particles < 2 {
            return Err(invalid("initial ensemble needs at least 2 particles"));
        }
        let truth = self.spun_up_truth(spinup, rng)?;
        let ens = self.initial_ensemble(&truth, n_particles, rng)?;
        Ok((truth, ens))
    }
}

pub const L96_SPINUP: f64 = 10.0;
pub const L96_NOISE: f64 = 0.25;

/// `[h(x)]_i = √(x_{2i}² + x_{2i+1}²)` (0-based), `i = 0..n/2`.
#[derive(Debug, Default)]
pub struct PairMagnitudeOperator {
    n: usize,
    singular: AtomicU64,
}

impl PairMagnitudeOperator {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n % 2 != 0 {
            return Err(invalid(format!("pair magnitudes need an even dimension, got {n}")));
        }
        Ok(Self {
            n,
            singular: AtomicU64::new(0),
        })
    }
}

impl ObservationOperator for PairMagnitudeOperator {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn obs_dim(&self) -> usize {
        self.n / 2
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n / 2, |i, _| x[2 * i].hypot(x[2 * i + 1]))
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n / 2, self.n);
        for i in 0..self.n / 2 {
            let (a, b) = (x[2 * i], x[2 * i + 1]);
            let r = a.hypot(b);
            if r == 0.0 {
                self.singular.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            h[(i, 2 * i)] = a / r;
            h[(i, 2 * i + 1)] = b / r;
        }
        h
    }

    fn singular_jacobians(&self) -> u64 {
        self.singular.load(Ordering::Relaxed)
    }
}

/// Paired magnitudes of the 40 Lorenz '96 variables with `R = 0.25·I₂₀`.
/// The observation is a placeholder to be replaced per window.
pub fn l96_measurement(n: usize) -> Result<MeasurementModel> {
    let op = PairMagnitudeOperator::new(n)?;
    let m = op.obs_dim();
    MeasurementModel::new(
        Arc::new(op),
        SpdMatrix::from_diagonal(&vec![L96_NOISE; m])?,
        DVector::zeros(m),
    )
}

/// Central-difference Jacobian, for checking analytic ones.
pub fn finite_difference_jacobian(op: &dyn ObservationOperator, x: &DVector<f64>, step: f64) -> Result<DMatrix<f64>> {
    check_dim(op.state_dim(), x.len())?;
    let mut jac = DMatrix::zeros(op.obs_dim(), x.len());
    for j in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += step;
        lo[j] -= step;
        let d = (op.apply(&hi) - op.apply(&lo)) / (2.0 * step);
        jac.set_column(j, &d);
    }
    Ok(jac)
}
