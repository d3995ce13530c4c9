//! Closed-form kernel constants, densities, optimal bandwidths and kernel
//! efficiency for the Gaussian and Epanechnikov kernels in `n` dimensions.
//!
//! Both kernels are unit-covariance scaled. Every formula that carries a
//! Gamma function or an `n`-th power is evaluated in log space, so nothing
//! here overflows or underflows for `n ≤ 1000`.

use std::f64::consts::{LN_2, PI};

use nalgebra::DVector;
use statrs::function::gamma::ln_gamma;

use crate::ensemble::{CholeskyFactor, SpdMatrix};
use crate::error::{check_dim, invalid, Result};

const LN_PI: f64 = 1.144_729_885_849_400_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

/// AMISE constants `(α, β, γ)` of a kernel in dimension `n`.
///
/// `β` and `γ` are stored as logarithms; [`KernelConstants::beta`] and
/// [`KernelConstants::gamma`] exponentiate on demand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    pub kind: KernelKind,
    pub dim: usize,
    pub alpha: f64,
    pub ln_beta: f64,
    pub ln_gamma: f64,
}

impl KernelConstants {
    pub fn beta(&self) -> f64 {
        self.ln_beta.exp()
    }

    pub fn gamma(&self) -> f64 {
        self.ln_gamma.exp()
    }
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(invalid("dimension must be at least 1"))
    } else {
        Ok(())
    }
}

/// `ln c_n` with `c_n = π^{n/2} / Γ(n/2 + 1)`.
pub fn ln_unit_ball_volume(n: usize) -> Result<f64> {
    check_n(n)?;
    let half = n as f64 / 2.0;
    Ok(half * LN_PI - ln_gamma(half + 1.0))
}

/// Volume of the unit ball in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> Result<f64> {
    ln_unit_ball_volume(n).map(f64::exp)
}

/// Curvature functional of the unit Gaussian reference density,
/// `γ = (2ⁿ π^{n/2})⁻¹ (n/2 + n²/4)`, in log form.
fn ln_gaussian_reference_gamma(n: usize) -> f64 {
    let nf = n as f64;
    -nf * LN_2 - 0.5 * nf * LN_PI + (0.5 * nf + 0.25 * nf * nf).ln()
}

pub fn kernel_constants(kind: KernelKind, n: usize) -> Result<KernelConstants> {
    check_n(n)?;
    let nf = n as f64;
    let ln_beta = match kind {
        // (2√π)^{-n}
        KernelKind::Gaussian => -nf * (LN_2 + 0.5 * LN_PI),
        // (2/c_n)(n+2)(n+4)^{-n/2-1}
        KernelKind::Epanechnikov => {
            LN_2 - ln_unit_ball_volume(n)? + (nf + 2.0).ln() - (0.5 * nf + 1.0) * (nf + 4.0).ln()
        }
    };
    Ok(KernelConstants {
        kind,
        dim: n,
        alpha: 1.0,
        ln_beta,
        ln_gamma: ln_gaussian_reference_gamma(n),
    })
}

/// AMISE-optimal bandwidth `h = [β n / (α² γ N)]^{1/(n+4)}`.
pub fn optimal_bandwidth(constants: &KernelConstants, n_particles: usize) -> Result<f64> {
    if n_particles < 2 {
        return Err(invalid(format!(
            "bandwidth needs at least 2 particles, got {n_particles}"
        )));
    }
    let n = constants.dim as f64;
    let ln_h = (constants.ln_beta + n.ln()
        - 2.0 * constants.alpha.ln()
        - constants.ln_gamma
        - (n_particles as f64).ln())
        / (n + 4.0);
    Ok(ln_h.exp())
}

/// Bandwidth for a kernel kind, dimension and particle count.
pub fn bandwidth(kind: KernelKind, n: usize, n_particles: usize) -> Result<f64> {
    optimal_bandwidth(&kernel_constants(kind, n)?, n_particles)
}

/// `AMISE(h) = h⁴α²γ/4 + β / (N hⁿ)`. Test utility; filters never call it.
pub fn amise(constants: &KernelConstants, h: f64, n_particles: usize) -> f64 {
    let n = constants.dim as f64;
    0.25 * h.powi(4) * constants.alpha.powi(2) * constants.gamma()
        + (constants.ln_beta - (n_particles as f64).ln() - n * h.ln()).exp()
}

/// AMISE at the optimal bandwidth, evaluated from the factorized closed form
/// `(n+4)/4 · γ^{n/(n+4)} · C(K) · N^{-4/(n+4)}`.
pub fn amise_at_optimal(constants: &KernelConstants, n_particles: usize) -> f64 {
    let n = constants.dim as f64;
    let ln = ((n + 4.0) / 4.0).ln() + n / (n + 4.0) * constants.ln_gamma + ln_kernel_cost(constants)
        - 4.0 / (n + 4.0) * (n_particles as f64).ln();
    ln.exp()
}

/// `ln C(K)` with `C(K) = β (nβ/α²)^{-n/(n+4)}`.
pub fn ln_kernel_cost(constants: &KernelConstants) -> f64 {
    let n = constants.dim as f64;
    let ln_ratio = n.ln() + constants.ln_beta - 2.0 * constants.alpha.ln();
    constants.ln_beta - n / (n + 4.0) * ln_ratio
}

/// Efficiency of `kind` relative to the Epanechnikov kernel,
/// `(C(ℰ)/C(K))^{(n+4)/4}`, from the kernel constants.
pub fn kernel_efficiency(kind: KernelKind, n: usize) -> Result<f64> {
    let epan = kernel_constants(KernelKind::Epanechnikov, n)?;
    let other = kernel_constants(kind, n)?;
    let nf = n as f64;
    Ok(((nf + 4.0) / 4.0 * (ln_kernel_cost(&epan) - ln_kernel_cost(&other))).exp())
}

/// Closed-form Gaussian kernel efficiency
/// `2^{n+2} (n+4)^{-n/2-1} Γ(n/2+2)`.
pub fn gaussian_efficiency(n: usize) -> Result<f64> {
    check_n(n)?;
    let nf = n as f64;
    let ln = (nf + 2.0) * LN_2 - (0.5 * nf + 1.0) * (nf + 4.0).ln() + ln_gamma(0.5 * nf + 2.0);
    Ok(ln.exp())
}

/// Log-density of `𝒩(μ, Σ)` at `x`, with `Σ = L·Lᵀ` given by its factor.
pub fn gaussian_ln_pdf_factored(x: &DVector<f64>, mu: &DVector<f64>, factor: &CholeskyFactor) -> f64 {
    let n = x.len() as f64;
    let d = x - mu;
    -0.5 * (factor.mahalanobis_sq(&d) + factor.ln_det() + n * (2.0 * PI).ln())
}

pub fn gaussian_ln_pdf(x: &DVector<f64>, mu: &DVector<f64>, sigma: &SpdMatrix) -> Result<f64> {
    check_dim(x.len(), mu.len())?;
    check_dim(x.len(), sigma.dim())?;
    let factor = CholeskyFactor::strict(sigma)?;
    Ok(gaussian_ln_pdf_factored(x, mu, &factor))
}

pub fn gaussian_pdf(x: &DVector<f64>, mu: &DVector<f64>, sigma: &SpdMatrix) -> Result<f64> {
    gaussian_ln_pdf(x, mu, sigma).map(f64::exp)
}

/// Log of the normalizing constant of the unit-covariance Epanechnikov kernel,
/// `(n+2) / (2 c_n (n+4)^{(n+2)/2})`.
fn ln_epanechnikov_norm(n: usize) -> f64 {
    let nf = n as f64;
    (nf + 2.0).ln() - LN_2 - ln_unit_ball_volume(n).expect("n >= 1") - 0.5 * (nf + 2.0) * (nf + 4.0).ln()
}

/// Log-density of the Epanechnikov distribution with mean `μ` and covariance
/// `Σ = L·Lᵀ`; `-∞` outside the support ellipsoid.
pub fn epanechnikov_ln_pdf_factored(
    x: &DVector<f64>,
    mu: &DVector<f64>,
    factor: &CholeskyFactor,
) -> f64 {
    let n = x.len();
    let r2 = factor.mahalanobis_sq(&(x - mu));
    let gap = n as f64 + 4.0 - r2;
    // points within round-off of the boundary count as outside
    if gap <= 1e-12 * (n as f64 + 4.0) {
        return f64::NEG_INFINITY;
    }
    ln_epanechnikov_norm(n) + gap.ln() - 0.5 * factor.ln_det()
}

pub fn epanechnikov_pdf(x: &DVector<f64>, mu: &DVector<f64>, sigma: &SpdMatrix) -> Result<f64> {
    check_dim(x.len(), mu.len())?;
    check_dim(x.len(), sigma.dim())?;
    if x.is_empty() {
        return Err(invalid("dimension must be at least 1"));
    }
    let factor = CholeskyFactor::strict(sigma)?;
    Ok(epanechnikov_ln_pdf_factored(x, mu, &factor).exp())
}

/// Covariance of the Gaussian that approximates `ℰ(μ, Σ)` to first order:
/// `((n+4)/2) Σ`.
pub fn epanechnikov_gaussian_approx_cov(sigma: &SpdMatrix) -> SpdMatrix {
    let n = sigma.dim() as f64;
    sigma.scaled((n + 4.0) / 2.0)
}
