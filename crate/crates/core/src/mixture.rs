//! Gaussian-sum component updates and mixture weights.
//!
//! A prior component `(x⁻, P)` with `P = h²Σ̃⁻` is updated either by a single
//! EKF step or by the BRUF iteration. Three weight schemes are provided: the
//! Gaussian-sum weight, the Gaussian approximation of an Epanechnikov mode and
//! the unscented Epanechnikov weight.

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erf;

use crate::ensemble::{spd_factor, CholeskyFactor, SpdMatrix};
use crate::error::{check_dim, invalid, Result};
use crate::kernel_math::gaussian_ln_pdf_factored;
use crate::measurement::MeasurementModel;
use crate::sampling::radial_fraction_quantile;

/// One prior mode: mean, bandwidth-scaled covariance and log-weight.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
    pub log_weight: f64,
}

impl MixtureComponent {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        check_dim(mean.len(), cov.dim())?;
        Ok(Self {
            mean,
            cov,
            log_weight: 0.0,
        })
    }
}

/// A measurement-updated mode.
///
/// `log_weight` is the unnormalized Gaussian-sum weight
/// `ln 𝒩(y; h(x⁻), H P Hᵀ + R)` of the prior component.
#[derive(Debug, Clone)]
pub struct UpdatedComponent {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
    pub log_weight: f64,
    /// Innovation factorizations that needed diagonal jitter.
    pub jittered: u32,
}

/// How each component's mean and covariance are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateVariant {
    Ekf,
    /// `M` EKF steps with noise `M·R`, re-linearizing at every iterate.
    Bruf(usize),
}

impl UpdateVariant {
    pub fn iterations(self) -> usize {
        match self {
            UpdateVariant::Ekf => 1,
            UpdateVariant::Bruf(m) => m,
        }
    }
}

/// Unscented transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtParams {
    pub alpha_ut: f64,
    pub kappa_ut: f64,
    pub beta_ut: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha_ut: 1.0,
            kappa_ut: 3.0,
            beta_ut: 2.0,
        }
    }
}

/// Sigma-point weights for dimension `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtWeights {
    pub mean0: f64,
    pub cov0: f64,
    /// Shared by the `2n` non-central points, for both mean and covariance.
    pub other: f64,
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha_ut * self.alpha_ut * (n as f64 + self.kappa_ut) - n as f64
    }

    pub fn weights(&self, n: usize) -> Result<UtWeights> {
        let lambda = self.lambda(n);
        let denom = lambda + n as f64;
        if !(denom > 0.0) {
            return Err(invalid(format!("n + lambda = {denom} must be positive")));
        }
        let mean0 = lambda / denom;
        Ok(UtWeights {
            mean0,
            cov0: mean0 + 1.0 - self.alpha_ut * self.alpha_ut + self.beta_ut,
            other: 0.5 / denom,
        })
    }
}

/// `P·Hᵀ`, skipping the zero entries of `H`.
fn cov_times_jacobian_t(p: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = h.shape();
    let mut out = DMatrix::zeros(n, m);
    for r in 0..m {
        let mut col = out.column_mut(r);
        for c in 0..n {
            let v = h[(r, c)];
            if v != 0.0 {
                col.axpy(v, &p.column(c), 1.0);
            }
        }
    }
    out
}

/// `H·B`, skipping the zero entries of `H`.
fn jacobian_times(h: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = h.shape();
    let mut out = DMatrix::zeros(m, b.ncols());
    for r in 0..m {
        for c in 0..n {
            let v = h[(r, c)];
            if v != 0.0 {
                for k in 0..b.ncols() {
                    out[(r, k)] += v * b[(c, k)];
                }
            }
        }
    }
    out
}

/// Factor of `H P Hᵀ + c·R` together with `P Hᵀ`.
struct Innovation {
    hx: DVector<f64>,
    p_ht: DMatrix<f64>,
    factor: CholeskyFactor,
}

fn innovation(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    meas: &MeasurementModel,
    noise_scale: f64,
) -> Result<Innovation> {
    let h = meas.jacobian(x);
    check_dim(p.nrows(), h.ncols())?;
    let p_ht = cov_times_jacobian_t(p, &h);
    let mut s = jacobian_times(&h, &p_ht);
    s += meas.noise().values() * noise_scale;
    let factor = spd_factor(&SpdMatrix::symmetrized(s))?;
    Ok(Innovation {
        hx: meas.h(x),
        p_ht,
        factor,
    })
}

impl Innovation {
    fn ln_weight(&self, y: &DVector<f64>) -> f64 {
        gaussian_ln_pdf_factored(y, &self.hx, &self.factor)
    }

    /// Kalman step `(x − G(h(x) − y), P − G H P)` with `G = P Hᵀ S⁻¹`.
    fn apply(&self, x: &DVector<f64>, p: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let resid = &self.hx - y;
        let w = self.factor.solve_lower(&resid);
        let a = self.factor.solve_lower_mat(&self.p_ht.transpose());
        let mean = x - a.transpose() * w;
        let cov = p - a.transpose() * &a;
        (mean, cov)
    }
}

/// Single EKF update of one component, linearized at the prior mean.
pub fn ekf_component_update(comp: &MixtureComponent, meas: &MeasurementModel) -> Result<UpdatedComponent> {
    bruf_component_update(comp, meas, 1)
}

/// `M` EKF iterations with noise `M·R`; the weight comes from the prior component.
pub fn bruf_component_update(
    comp: &MixtureComponent,
    meas: &MeasurementModel,
    m: usize,
) -> Result<UpdatedComponent> {
    if m == 0 {
        return Err(invalid("BRUF needs at least one iteration"));
    }
    check_dim(meas.state_dim(), comp.mean.len())?;
    let y = meas.observation();
    let mut jittered = 0u32;
    let mut x = comp.mean.clone();
    let mut p = comp.cov.values().clone();
    let mut log_weight = f64::NAN;
    for k in 0..m {
        let inn = innovation(&x, &p, meas, m as f64)?;
        jittered += u32::from(inn.factor.jitter().is_some());
        if k == 0 && m == 1 {
            log_weight = inn.ln_weight(y);
        }
        (x, p) = inn.apply(&x, &p, y);
    }
    if m > 1 {
        let inn = innovation(&comp.mean, comp.cov.values(), meas, 1.0)?;
        jittered += u32::from(inn.factor.jitter().is_some());
        log_weight = inn.ln_weight(y);
    }
    Ok(UpdatedComponent {
        mean: x,
        cov: SpdMatrix::symmetrized(p),
        log_weight,
        jittered,
    })
}

pub fn component_update(
    comp: &MixtureComponent,
    meas: &MeasurementModel,
    variant: UpdateVariant,
) -> Result<UpdatedComponent> {
    bruf_component_update(comp, meas, variant.iterations())
}

/// Log-weights after normalization, with a flag for the uniform fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub log_weights: Vec<f64>,
    pub fallback: bool,
}

impl NormalizedWeights {
    /// Log-sum-exp normalization. If no weight is finite (or any is NaN) the
    /// weights become uniform and `fallback` is set.
    pub fn from_log(mut log_weights: Vec<f64>) -> Self {
        let n = log_weights.len();
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if n == 0 || !max.is_finite() || log_weights.iter().any(|w| w.is_nan()) {
            let u = -(n as f64).ln();
            return Self {
                log_weights: vec![u; n],
                fallback: n > 0,
            };
        }
        let lse = max + log_weights.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
        for w in log_weights.iter_mut() {
            *w -= lse;
        }
        Self {
            log_weights,
            fallback: false,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Shannon entropy `−Σ w ln w` in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .log_weights
            .iter()
            .filter(|w| w.is_finite())
            .map(|&w| w.exp() * w)
            .sum::<f64>()
    }
}

/// `ln 𝒩(y; h(x), H P Hᵀ + R)` with `H` taken at `x`.
fn projected_ln_weight(x: &DVector<f64>, p: &DMatrix<f64>, meas: &MeasurementModel) -> Result<f64> {
    Ok(innovation(x, p, meas, 1.0)?.ln_weight(meas.observation()))
}

/// Gaussian-sum weights `w_i ∝ 𝒩(y; h(x_i), H_i P_i H_iᵀ + R)`.
pub fn engmf_weights(comps: &[MixtureComponent], meas: &MeasurementModel) -> Result<NormalizedWeights> {
    let logs = comps
        .iter()
        .map(|c| projected_ln_weight(&c.mean, c.cov.values(), meas))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedWeights::from_log(logs))
}

/// As [`engmf_weights`] with each covariance scaled by `s_E (n+4)/2`.
pub fn enemf_gaussian_weights(
    comps: &[MixtureComponent],
    meas: &MeasurementModel,
    s_e: f64,
) -> Result<NormalizedWeights> {
    if !(s_e > 0.0) {
        return Err(invalid(format!("s_E = {s_e} must be positive")));
    }
    let logs = comps
        .iter()
        .map(|c| {
            let scale = s_e * (c.mean.len() as f64 + 4.0) / 2.0;
            projected_ln_weight(&c.mean, &(c.cov.values() * scale), meas)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedWeights::from_log(logs))
}

/// Offsets `Ξ^ℰ_j − μ`, `j = 0..2n`, of the Epanechnikov sigma points.
///
/// The Gaussian point `μ ± √(n+λ) F e_i` has whitened radius `m = √(n+λ)`
/// and direction `±e_i`; its radius is remapped through the half-normal CDF
/// and the radial-fraction quantile to `√(n+4)·z`.
pub fn epanechnikov_sigma_offsets(factor: &DMatrix<f64>, params: &UtParams) -> Result<Vec<DVector<f64>>> {
    let n = factor.nrows();
    check_dim(n, factor.ncols())?;
    if n == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    let spread = params.lambda(n) + n as f64;
    if !(spread > 0.0) {
        return Err(invalid(format!("n + lambda = {spread} must be positive")));
    }
    let m = spread.sqrt();
    let z = radial_fraction_quantile(n, erf(m / std::f64::consts::SQRT_2))?;
    let radius = (n as f64 + 4.0).sqrt() * z;
    let mut out = Vec::with_capacity(2 * n + 1);
    out.push(DVector::zeros(n));
    for sign in [1.0, -1.0] {
        for i in 0..n {
            out.push(factor.column(i) * (sign * radius));
        }
    }
    Ok(out)
}

/// The `2n + 1` Epanechnikov sigma points of `ℰ(μ, F Fᵀ)`.
pub fn epanechnikov_sigma_points(
    mu: &DVector<f64>,
    factor: &DMatrix<f64>,
    params: &UtParams,
) -> Result<Vec<DVector<f64>>> {
    check_dim(mu.len(), factor.nrows())?;
    Ok(epanechnikov_sigma_offsets(factor, params)?
        .into_iter()
        .map(|d| mu + d)
        .collect())
}

/// Unnormalized unscented weight of one component given its sigma points.
fn unscented_ln_weight(
    points: &[DVector<f64>],
    w: &UtWeights,
    meas: &MeasurementModel,
) -> Result<(f64, bool)> {
    let ys: Vec<DVector<f64>> = points.iter().map(|x| meas.h(x)).collect();
    let mean_w = |j: usize| if j == 0 { w.mean0 } else { w.other };
    let cov_w = |j: usize| if j == 0 { w.cov0 } else { w.other };
    let mut y_bar = DVector::zeros(meas.obs_dim());
    for (j, yj) in ys.iter().enumerate() {
        y_bar.axpy(mean_w(j), yj, 1.0);
    }
    let mut s = meas.noise().values().clone();
    for (j, yj) in ys.iter().enumerate() {
        let d = yj - &y_bar;
        s.ger(cov_w(j), &d, &d, 1.0);
    }
    let factor = spd_factor(&SpdMatrix::symmetrized(s))?;
    let y = meas.observation();
    let terms: Vec<f64> = ys
        .iter()
        .enumerate()
        .map(|(j, yj)| mean_w(j).ln() + gaussian_ln_pdf_factored(y, yj, &factor))
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok((lse, factor.jitter().is_some()))
}

/// Unscented Epanechnikov weights: sigma points of `ℰ(x_i, s_E P_i)`, then
/// `w_i ∝ Σ_j W_j 𝒩(y; h(Ξ_j), Σ_y + R)`.
pub fn enemf_unscented_weights(
    comps: &[MixtureComponent],
    meas: &MeasurementModel,
    s_e: f64,
    params: &UtParams,
) -> Result<NormalizedWeights> {
    if !(s_e > 0.0) {
        return Err(invalid(format!("s_E = {s_e} must be positive")));
    }
    let logs = comps
        .iter()
        .map(|c| {
            let n = c.mean.len();
            let factor = spd_factor(&c.cov.scaled(s_e))?;
            let points = epanechnikov_sigma_points(&c.mean, factor.lower(), params)?;
            Ok(unscented_ln_weight(&points, &params.weights(n)?, meas)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NormalizedWeights::from_log(logs))
}

/// Shared-covariance unscented weights: every component has covariance
/// `s_E·P`, so the sigma offsets are built once.
pub(crate) fn enemf_unscented_ln_weight_shared(
    mean: &DVector<f64>,
    offsets: &[DVector<f64>],
    weights: &UtWeights,
    meas: &MeasurementModel,
) -> Result<(f64, bool)> {
    let points: Vec<DVector<f64>> = offsets.iter().map(|d| mean + d).collect();
    unscented_ln_weight(&points, weights, meas)
}

/// Shared-covariance Gaussian-approximation weight.
pub(crate) fn projected_ln_weight_with_jitter(
    x: &DVector<f64>,
    p: &DMatrix<f64>,
    meas: &MeasurementModel,
) -> Result<(f64, bool)> {
    let inn = innovation(x, p, meas, 1.0)?;
    Ok((inn.ln_weight(meas.observation()), inn.factor.jitter().is_some()))
}
