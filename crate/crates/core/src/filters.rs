//! Analysis steps: the linearized stochastic EnKF, the EnGMF and the two
//! EnEMF variants behind [`analyze`].
//!
//! Component updates run in parallel over particles and consume no
//! randomness; all random draws happen afterwards on the caller's stream, so
//! results do not depend on the thread count.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::ensemble::{
    ensemble_covariance, ensemble_mean, inflate, localize, spd_factor, Ensemble, LocalizationTaper,
    SpdMatrix,
};
use crate::error::{check_dim, invalid, Result};
use crate::kernel_math::{bandwidth, KernelKind};
use crate::measurement::MeasurementModel;
use crate::mixture::{
    component_update, enemf_unscented_ln_weight_shared, epanechnikov_sigma_offsets,
    projected_ln_weight_with_jitter, MixtureComponent, NormalizedWeights, UpdateVariant,
    UpdatedComponent, UtParams,
};
use crate::resampling::{emm_resample, gmm_resample, PosteriorMixture};
use crate::sampling::standard_normal_vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterKind {
    EnKF,
    EnGMF,
    /// Epanechnikov mixture with Gaussian-approximation weights.
    EnEMFG,
    /// Epanechnikov mixture with unscented weights.
    EnEMFU,
}

impl FilterKind {
    pub const ALL: [FilterKind; 4] = [FilterKind::EnEMFG, FilterKind::EnEMFU, FilterKind::EnGMF, FilterKind::EnKF];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::EnKF => "EnKF",
            FilterKind::EnGMF => "EnGMF",
            FilterKind::EnEMFG => "EnEMF-G",
            FilterKind::EnEMFU => "EnEMF-U",
        }
    }

    pub fn is_enemf(self) -> bool {
        matches!(self, FilterKind::EnEMFG | FilterKind::EnEMFU)
    }
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub update: UpdateVariant,
    /// Weight-covariance scale, EnEMF only.
    pub s_e: Option<f64>,
    /// Anomaly inflation, used by the EnKF only.
    pub alpha_inf: f64,
    pub taper: Option<LocalizationTaper>,
    pub ut: UtParams,
}

impl FilterConfig {
    pub fn enkf(alpha_inf: f64) -> Self {
        Self {
            kind: FilterKind::EnKF,
            update: UpdateVariant::Ekf,
            s_e: None,
            alpha_inf,
            taper: None,
            ut: UtParams::default(),
        }
    }

    pub fn engmf(update: UpdateVariant) -> Self {
        Self {
            kind: FilterKind::EnGMF,
            update,
            ..Self::enkf(1.0)
        }
    }

    pub fn enemf_gaussian(s_e: f64, update: UpdateVariant) -> Self {
        Self {
            kind: FilterKind::EnEMFG,
            update,
            s_e: Some(s_e),
            ..Self::enkf(1.0)
        }
    }

    pub fn enemf_unscented(s_e: f64, update: UpdateVariant) -> Self {
        Self {
            kind: FilterKind::EnEMFU,
            update,
            s_e: Some(s_e),
            ..Self::enkf(1.0)
        }
    }

    pub fn with_taper(mut self, taper: LocalizationTaper) -> Self {
        self.taper = Some(taper);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let UpdateVariant::Bruf(0) = self.update {
            return Err(invalid("BRUF needs M >= 1"));
        }
        match (self.kind.is_enemf(), self.s_e) {
            (true, Some(s)) if s > 0.0 && s.is_finite() => {}
            (true, _) => return Err(invalid(format!("{} needs a positive s_E", self.kind.name()))),
            (false, Some(_)) => return Err(invalid(format!("s_E is only meaningful for EnEMF, not {}", self.kind.name()))),
            (false, None) => {}
        }
        if !(self.alpha_inf >= 1.0) || !self.alpha_inf.is_finite() {
            return Err(invalid(format!("alpha_inf must be >= 1, got {}", self.alpha_inf)));
        }
        Ok(())
    }
}

/// Counters collected during one analysis step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Entropy of the normalized mixture weights in nats; 0 for the EnKF.
    pub weight_entropy: f64,
    /// Factorizations that needed diagonal jitter.
    pub jitter_count: u64,
    /// Weight normalizations that fell back to uniform weights.
    pub underflow_fallbacks: u64,
    /// Radial draws that fell back to the likelihood-free law.
    pub radial_fallbacks: u64,
}

impl Diagnostics {
    pub fn accumulate(&mut self, other: &Diagnostics) {
        self.weight_entropy += other.weight_entropy;
        self.jitter_count += other.jitter_count;
        self.underflow_fallbacks += other.underflow_fallbacks;
        self.radial_fallbacks += other.radial_fallbacks;
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub posterior: Ensemble,
    pub diagnostics: Diagnostics,
}

fn check_inputs(ens: &Ensemble, meas: &MeasurementModel) -> Result<()> {
    if ens.len() < 2 {
        return Err(invalid(format!("analysis needs at least 2 particles, got {}", ens.len())));
    }
    check_dim(meas.state_dim(), ens.dim())
}

fn sample_covariance(ens: &Ensemble, taper: Option<&LocalizationTaper>) -> Result<SpdMatrix> {
    let cov = ensemble_covariance(ens)?;
    match taper {
        Some(t) => localize(&cov, t),
        None => Ok(cov),
    }
}

/// Stochastic EnKF with a single Jacobian at the ensemble mean:
/// `x_i⁺ = x_i + K (y + η_i − h(x_i))`, `K = P Hᵀ (H P Hᵀ + R)⁻¹`.
pub fn enkf_analyze<R: Rng + ?Sized>(
    ens: &Ensemble,
    meas: &MeasurementModel,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisResult> {
    check_inputs(ens, meas)?;
    let inflated = inflate(ens, cfg.alpha_inf)?;
    let p = sample_covariance(&inflated, cfg.taper.as_ref())?;
    let mean = ensemble_mean(&inflated)?;
    let h = meas.jacobian(&mean);
    let p_ht = p.values() * h.transpose();
    let s = SpdMatrix::symmetrized(&h * &p_ht + meas.noise().values());
    let s_factor = spd_factor(&s)?;
    // Kᵀ = S⁻¹ H P
    let gain = s_factor.solve_mat(&p_ht.transpose()).transpose();
    let noise = meas.noise_factor();
    let mut posterior = inflated.clone();
    for (i, mut col) in posterior.states_mut().column_iter_mut().enumerate() {
        let x = inflated.member(i);
        let eta = noise.mul_vec(&standard_normal_vector(meas.obs_dim(), rng));
        let innov = meas.observation() + eta - meas.h(&x);
        col += &gain * innov;
    }
    Ok(AnalysisResult {
        posterior: Ensemble::new(posterior.into_states())?,
        diagnostics: Diagnostics {
            jitter_count: u64::from(s_factor.jitter().is_some()),
            ..Diagnostics::default()
        },
    })
}

/// Shared first stage of the mixture filters: components `(x_i, h²Σ̃)` and
/// their updates.
struct MixtureStage {
    prior_means: Vec<DVector<f64>>,
    prior_cov: SpdMatrix,
    updated: Vec<UpdatedComponent>,
    jitter_count: u64,
}

fn mixture_stage(
    ens: &Ensemble,
    meas: &MeasurementModel,
    cfg: &FilterConfig,
    kernel: KernelKind,
) -> Result<MixtureStage> {
    let cov = sample_covariance(ens, cfg.taper.as_ref())?;
    let h = bandwidth(kernel, ens.dim(), ens.len())?;
    let prior_cov = cov.scaled(h * h);
    let prior_means: Vec<DVector<f64>> = ens.members().collect();
    let updated = prior_means
        .par_iter()
        .map(|m| {
            let comp = MixtureComponent {
                mean: m.clone(),
                cov: prior_cov.clone(),
                log_weight: 0.0,
            };
            component_update(&comp, meas, cfg.update)
        })
        .collect::<Result<Vec<_>>>()?;
    let jitter_count = updated.iter().map(|u| u64::from(u.jittered)).sum();
    Ok(MixtureStage {
        prior_means,
        prior_cov,
        updated,
        jitter_count,
    })
}

/// Gaussian KDE prior, Gaussian-sum update, Gaussian resampling.
pub fn engmf_analyze<R: Rng + ?Sized>(
    ens: &Ensemble,
    meas: &MeasurementModel,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisResult> {
    check_inputs(ens, meas)?;
    let stage = mixture_stage(ens, meas, cfg, KernelKind::Gaussian)?;
    let weights = NormalizedWeights::from_log(stage.updated.iter().map(|u| u.log_weight).collect());
    let post = PosteriorMixture::with_shared_prior(
        stage.prior_means,
        &stage.prior_cov,
        &stage.updated,
        &weights.log_weights,
    )?;
    let posterior = gmm_resample(&post, ens.len(), rng)?;
    Ok(AnalysisResult {
        posterior,
        diagnostics: Diagnostics {
            weight_entropy: weights.entropy(),
            jitter_count: stage.jitter_count + post.jittered_factors(),
            underflow_fallbacks: u64::from(weights.fallback),
            radial_fallbacks: 0,
        },
    })
}

/// Epanechnikov KDE prior, Gaussian-sum update of means and covariances,
/// Gaussian-approximation or unscented weights, shell-projection resampling.
pub fn enemf_analyze<R: Rng + ?Sized>(
    ens: &Ensemble,
    meas: &MeasurementModel,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisResult> {
    check_inputs(ens, meas)?;
    let s_e = match (cfg.kind, cfg.s_e) {
        (FilterKind::EnEMFG | FilterKind::EnEMFU, Some(s)) if s > 0.0 => s,
        _ => return Err(invalid("enemf_analyze needs an EnEMF configuration with s_E > 0")),
    };
    let n = ens.dim();
    let stage = mixture_stage(ens, meas, cfg, KernelKind::Epanechnikov)?;
    let raw: Vec<(f64, bool)> = match cfg.kind {
        FilterKind::EnEMFG => {
            let p = stage.prior_cov.values() * (s_e * (n as f64 + 4.0) / 2.0);
            stage
                .prior_means
                .par_iter()
                .map(|m| projected_ln_weight_with_jitter(m, &p, meas))
                .collect::<Result<_>>()?
        }
        _ => {
            let factor = spd_factor(&stage.prior_cov.scaled(s_e))?;
            let offsets = epanechnikov_sigma_offsets(factor.lower(), &cfg.ut)?;
            let w = cfg.ut.weights(n)?;
            stage
                .prior_means
                .par_iter()
                .map(|m| enemf_unscented_ln_weight_shared(m, &offsets, &w, meas))
                .collect::<Result<_>>()?
        }
    };
    let weight_jitter = raw.iter().filter(|(_, j)| *j).count() as u64;
    let weights = NormalizedWeights::from_log(raw.into_iter().map(|(w, _)| w).collect());
    let post = PosteriorMixture::with_shared_prior(
        stage.prior_means,
        &stage.prior_cov,
        &stage.updated,
        &weights.log_weights,
    )?;
    let (posterior, radial_fallbacks) = emm_resample(&post, meas, ens.len(), rng)?;
    Ok(AnalysisResult {
        posterior,
        diagnostics: Diagnostics {
            weight_entropy: weights.entropy(),
            jitter_count: stage.jitter_count + weight_jitter + post.jittered_factors(),
            underflow_fallbacks: u64::from(weights.fallback),
            radial_fallbacks,
        },
    })
}

/// Runs the analysis step selected by `cfg.kind`.
pub fn analyze<R: Rng + ?Sized>(
    ens: &Ensemble,
    meas: &MeasurementModel,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisResult> {
    cfg.validate()?;
    match cfg.kind {
        FilterKind::EnKF => enkf_analyze(ens, meas, cfg, rng),
        FilterKind::EnGMF => engmf_analyze(ens, meas, cfg, rng),
        FilterKind::EnEMFG | FilterKind::EnEMFU => enemf_analyze(ens, meas, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::LinearOperator;
    use crate::sampling::RngStream;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn scalar_meas(r: f64, y: f64) -> MeasurementModel {
        MeasurementModel::new(
            Arc::new(LinearOperator::new(DMatrix::from_element(1, 1, 1.0))),
            SpdMatrix::from_diagonal(&[r]).unwrap(),
            DVector::from_element(1, y),
        )
        .unwrap()
    }

    fn gaussian_ensemble(n_particles: usize, mean: f64, sd: f64, seed: u64) -> Ensemble {
        let mut rng = RngStream::new(seed, 99);
        let z = standard_normal_vector(n_particles, &mut rng);
        Ensemble::new(DMatrix::from_fn(1, n_particles, |_, j| mean + sd * z[j])).unwrap()
    }

    fn all_configs() -> Vec<FilterConfig> {
        vec![
            FilterConfig::enkf(1.0),
            FilterConfig::engmf(UpdateVariant::Ekf),
            FilterConfig::enemf_gaussian(0.4, UpdateVariant::Ekf),
            FilterConfig::enemf_unscented(0.5, UpdateVariant::Bruf(3)),
        ]
    }

    #[test]
    fn config_validation() {
        for cfg in all_configs() {
            cfg.validate().unwrap();
        }
        let mut bad = FilterConfig::enemf_gaussian(0.4, UpdateVariant::Ekf);
        bad.s_e = None;
        assert!(bad.validate().is_err());
        let mut bad = FilterConfig::enkf(1.01);
        bad.s_e = Some(1.0);
        assert!(bad.validate().is_err());
        assert!(FilterConfig::engmf(UpdateVariant::Bruf(0)).validate().is_err());
        assert!(FilterConfig::enkf(0.9).validate().is_err());
    }

    #[test]
    fn enkf_matches_scalar_kalman() {
        // prior 𝒩(1, 4), R = 1, y = 3: mean 2.6, variance 0.8
        let ens = gaussian_ensemble(10_000, 1.0, 2.0, 1);
        let prior_mean = ensemble_mean(&ens).unwrap()[0];
        let prior_var = ensemble_covariance(&ens).unwrap().values()[(0, 0)];
        let k = prior_var / (prior_var + 1.0);
        let res = enkf_analyze(&ens, &scalar_meas(1.0, 3.0), &FilterConfig::enkf(1.0), &mut RngStream::new(2, 0)).unwrap();
        let m = ensemble_mean(&res.posterior).unwrap()[0];
        let v = ensemble_covariance(&res.posterior).unwrap().values()[(0, 0)];
        assert!((m - (prior_mean + k * (3.0 - prior_mean))).abs() < 0.02 * 2.6);
        assert!((v - (1.0 - k) * prior_var).abs() < 0.02 * 0.8 * 2.0);
        assert!((m - 2.6).abs() / 2.6 < 0.02);
    }

    #[test]
    fn engmf_matches_scalar_kalman() {
        let ens = gaussian_ensemble(10_000, 1.0, 2.0, 3);
        let res = engmf_analyze(&ens, &scalar_meas(1.0, 3.0), &FilterConfig::engmf(UpdateVariant::Ekf), &mut RngStream::new(4, 0)).unwrap();
        let m = ensemble_mean(&res.posterior).unwrap()[0];
        assert!((m - 2.6).abs() / 2.6 < 0.03, "mean {m}");
        assert_eq!(res.diagnostics.underflow_fallbacks, 0);
    }

    #[test]
    fn single_particle_rejected() {
        let ens = gaussian_ensemble(1, 0.0, 1.0, 5);
        for cfg in all_configs() {
            assert!(analyze(&ens, &scalar_meas(1.0, 0.0), &cfg, &mut RngStream::new(0, 0)).is_err());
        }
    }

    #[test]
    fn uninformative_measurement_keeps_prior_mean() {
        let ens = gaussian_ensemble(200, -0.5, 1.0, 6);
        let meas = scalar_meas(1e12, 40.0);
        let prior = ensemble_mean(&ens).unwrap()[0];
        for cfg in all_configs() {
            let res = analyze(&ens, &meas, &cfg, &mut RngStream::new(7, 0)).unwrap();
            assert_eq!(res.posterior.dim(), 1);
            assert_eq!(res.posterior.len(), 200);
            let m = ensemble_mean(&res.posterior).unwrap()[0];
            if cfg.kind == FilterKind::EnKF {
                assert!((m - prior).abs() < 1e-3, "{}: {m} vs {prior}", cfg.kind.name());
            } else {
                // resampling adds Monte-Carlo noise of order σ/√N
                assert!((m - prior).abs() < 0.25, "{}: {m} vs {prior}", cfg.kind.name());
                let kernel = if cfg.kind == FilterKind::EnGMF { KernelKind::Gaussian } else { KernelKind::Epanechnikov };
                let stage = mixture_stage(&ens, &meas, &cfg, kernel).unwrap();
                let comps: Vec<_> = stage
                    .prior_means
                    .iter()
                    .map(|x| MixtureComponent::new(x.clone(), stage.prior_cov.clone()).unwrap())
                    .collect();
                let w = match cfg.kind {
                    FilterKind::EnGMF => crate::mixture::engmf_weights(&comps, &meas).unwrap(),
                    FilterKind::EnEMFG => crate::mixture::enemf_gaussian_weights(&comps, &meas, 0.4).unwrap(),
                    _ => crate::mixture::enemf_unscented_weights(&comps, &meas, 0.5, &cfg.ut).unwrap(),
                };
                let mixture_mean: f64 = w.weights().iter().zip(&stage.updated).map(|(wi, u)| wi * u.mean[0]).sum();
                assert!((mixture_mean - prior).abs() < 1e-3, "{}: {mixture_mean} vs {prior}", cfg.kind.name());
            }
        }
    }

    #[test]
    fn enemf_variants_share_the_update() {
        let ens = gaussian_ensemble(50, 0.0, 1.0, 8);
        let meas = scalar_meas(0.1, 0.8);
        let g = FilterConfig::enemf_gaussian(0.4, UpdateVariant::Ekf);
        let u = FilterConfig::enemf_unscented(0.4, UpdateVariant::Ekf);
        let a = mixture_stage(&ens, &meas, &g, KernelKind::Epanechnikov).unwrap();
        let b = mixture_stage(&ens, &meas, &u, KernelKind::Epanechnikov).unwrap();
        for (x, y) in a.updated.iter().zip(&b.updated) {
            assert_eq!(x.mean, y.mean);
            assert_eq!(x.cov, y.cov);
        }
    }

    #[test]
    fn analysis_is_deterministic_across_thread_counts() {
        let ens = gaussian_ensemble(64, 0.3, 1.5, 9);
        let meas = scalar_meas(0.2, 1.0);
        for cfg in all_configs() {
            let run = |threads| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| analyze(&ens, &meas, &cfg, &mut RngStream::new(10, 3)).unwrap().posterior)
            };
            assert_eq!(run(1), run(4));
        }
    }

    #[test]
    fn engmf_beats_prior_mean_on_banana() {
        use crate::models::{banana_measurement, banana_prior, PriorKind};
        let prior = banana_prior(2, PriorKind::Gaussian).unwrap();
        let meas = banana_measurement(2).unwrap();
        let cfg = FilterConfig::engmf(UpdateVariant::Ekf);
        let (mut filter_sq, mut prior_sq) = (0.0, 0.0);
        for trial in 0..100 {
            let mut rng = RngStream::new(12, trial);
            let truth = prior.sample_posterior(&meas, 500, &mut rng).unwrap();
            let ens = prior.sample_ensemble(100, &mut rng).unwrap();
            let post = analyze(&ens, &meas, &cfg, &mut rng).unwrap().posterior;
            filter_sq += (ensemble_mean(&post).unwrap() - &truth).norm_squared();
            prior_sq += (prior.mean() - &truth).norm_squared();
        }
        assert!(filter_sq < prior_sq, "{} vs {}", (filter_sq / 100.0).sqrt(), (prior_sq / 100.0).sqrt());
    }
}
