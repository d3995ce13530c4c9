//! Reproducible random variates.
//!
//! All samplers are generic over [`rand::Rng`]; the experiments use
//! [`RngStream`], a ChaCha8 generator keyed by `(seed, stream_id)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};

/// Default node count of the grid inverse-CDF sampler.
pub const DEFAULT_GRID_SIZE: usize = 1024;

/// A deterministic random stream: the same `(seed, stream_id)` always yields
/// the same sequence, and distinct stream ids give independent ChaCha streams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Folds a tuple of identifiers into one stream id (splitmix64 finalizer).
pub fn stream_key(parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| {
        mix(acc.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ mix(p))
    })
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `μ + F·z`, `z ~ 𝒩(0, I)`, for any factor `F` with `F·Fᵀ = Σ`.
pub fn sample_gaussian<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_dim(mu.len(), factor.nrows())?;
    let z = standard_normal_vector(factor.ncols(), rng);
    Ok(mu + factor * z)
}

/// `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let ga = Gamma::new(a, 1.0).map_err(|e| invalid(format!("beta shape a={a}: {e}")))?;
    let gb = Gamma::new(b, 1.0).map_err(|e| invalid(format!("beta shape b={b}: {e}")))?;
    loop {
        let x: f64 = rng.sample(ga);
        let y: f64 = rng.sample(gb);
        let s = x + y;
        if s > 0.0 {
            return Ok(x / s);
        }
    }
}

/// A point on the sphere of radius `√(n+4)` in direction of a standard normal draw.
pub(crate) fn shell_direction<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let radius = (n as f64 + 4.0).sqrt();
    loop {
        let s = standard_normal_vector(n, rng);
        let norm = s.norm();
        if norm > 0.0 {
            return s * (radius / norm);
        }
    }
}

/// Draws from the Epanechnikov distribution with mean `μ` and covariance `F·Fᵀ`.
///
/// A standard normal draw is projected onto the shell of radius `√(n+4)` and
/// scaled by the radial fraction `√η`, `η ~ Beta(n/2, 2)`.
pub fn sample_epanechnikov<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = mu.len();
    if n == 0 {
        return Err(invalid("dimension must be at least 1"));
    }
    check_dim(n, factor.nrows())?;
    check_dim(n, factor.ncols())?;
    let s_hat = shell_direction(n, rng);
    let eta = sample_beta(n as f64 / 2.0, 2.0, rng)?;
    Ok(mu + factor * (s_hat * eta.sqrt()))
}

/// CDF of the radial fraction `z = √η`, `η ~ Beta(n/2, 2)`:
/// `F(z) = (a+1) z^{2a} − a z^{2a+2}` with `a = n/2`.
pub fn radial_fraction_cdf(n: usize, z: f64) -> f64 {
    let a = n as f64 / 2.0;
    let eta = (z * z).clamp(0.0, 1.0);
    ((a + 1.0) * eta.powf(a) - a * eta.powf(a + 1.0)).clamp(0.0, 1.0)
}

/// Quantile of the radial fraction law, by bisection on [`radial_fraction_cdf`].
pub fn radial_fraction_quantile(n: usize, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("probability {p} outside [0, 1]")));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if radial_fraction_cdf(n, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Piecewise-linear CDF on `K + 1` equispaced nodes of `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridInverseCdf {
    cdf: Vec<f64>,
}

impl GridInverseCdf {
    /// Tabulates the (unnormalized) log-density at the nodes, exponentiates
    /// after a max shift and integrates with the trapezoidal rule.
    pub fn build(log_density: impl Fn(f64) -> f64, k: usize) -> Result<Self> {
        if k < 64 {
            return Err(invalid(format!("grid needs at least 64 intervals, got {k}")));
        }
        let step = 1.0 / k as f64;
        let mut logs = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let v = log_density(i as f64 * step);
            if v.is_nan() || v == f64::INFINITY {
                return Err(invalid(format!("log-density is {v} at z = {}", i as f64 * step)));
            }
            logs.push(v);
        }
        Self::from_log_values(&logs)
    }

    /// Same as [`GridInverseCdf::build`] from pre-tabulated log values.
    pub fn from_log_values(logs: &[f64]) -> Result<Self> {
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::ZeroSupport);
        }
        let dens: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
        let mut cdf = Vec::with_capacity(dens.len());
        cdf.push(0.0);
        let mut acc = 0.0;
        for w in dens.windows(2) {
            acc += 0.5 * (w[0] + w[1]);
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            // a single isolated node carries all the mass
            return Err(Error::ZeroSupport);
        }
        for c in cdf.iter_mut() {
            *c = (*c / acc).min(1.0);
        }
        *cdf.last_mut().expect("non-empty") = 1.0;
        Ok(Self { cdf })
    }

    pub fn intervals(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn cdf_values(&self) -> &[f64] {
        &self.cdf
    }

    /// Linear interpolation of the tabulated CDF at `z ∈ [0, 1]`.
    pub fn cdf_at(&self, z: f64) -> f64 {
        let k = self.intervals();
        let t = z.clamp(0.0, 1.0) * k as f64;
        let i = (t.floor() as usize).min(k - 1);
        let frac = t - i as f64;
        self.cdf[i] + frac * (self.cdf[i + 1] - self.cdf[i])
    }

    /// Inverse of the piecewise-linear CDF; `invert(0) = 0`, `invert(1) = 1`.
    pub fn invert(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(invalid(format!("u = {u} outside [0, 1]")));
        }
        if u == 1.0 {
            return Ok(1.0);
        }
        let k = self.intervals();
        let step = 1.0 / k as f64;
        let i = self.cdf.partition_point(|&c| c < u);
        if i == 0 {
            return Ok(0.0);
        }
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 1.0 };
        Ok(((i - 1) as f64 + frac) * step)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        self.invert(u).expect("u in [0, 1)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u64> = (0..8).map({
            let mut r = RngStream::new(7, 3);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..8).map({
            let mut r = RngStream::new(7, 3);
            move |_| r.next_u64()
        }).collect();
        let c: Vec<u64> = (0..8).map({
            let mut r = RngStream::new(7, 4);
            move |_| r.next_u64()
        }).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(stream_key(&[1, 2]), stream_key(&[2, 1]));
        assert_eq!(stream_key(&[5, 6, 7]), stream_key(&[5, 6, 7]));
    }

    #[test]
    fn gaussian_degenerate_factor() {
        let mut rng = RngStream::new(1, 0);
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        for _ in 0..10 {
            assert_eq!(sample_gaussian(&mu, &DMatrix::zeros(2, 2), &mut rng).unwrap(), mu);
        }
        assert!(sample_gaussian(&mu, &DMatrix::zeros(3, 3), &mut rng).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = RngStream::new(2, 0);
        let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let f = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 2.0, 0.0, -0.3, 0.2, 0.7]);
        let sigma = &f * f.transpose();
        let draws: Vec<_> = (0..100_000).map(|_| sample_gaussian(&mu, &f, &mut rng).unwrap()).collect();
        let ens = crate::ensemble::Ensemble::from_columns(3, &draws).unwrap();
        let m = crate::ensemble::ensemble_mean(&ens).unwrap();
        for i in 0..3 {
            assert!((m[i] - mu[i]).abs() < 4.0 * sigma[(i, i)].sqrt() / 100_000f64.sqrt());
        }
        let c = crate::ensemble::ensemble_covariance(&ens).unwrap();
        assert!((c.values() - &sigma).norm() / sigma.norm() < 0.05);
    }

    #[test]
    fn beta_matches_its_cdf() {
        let mut rng = RngStream::new(3, 0);
        for n in [1usize, 2, 5] {
            let a = n as f64 / 2.0;
            let draws: Vec<f64> = (0..100_000).map(|_| sample_beta(a, 2.0, &mut rng).unwrap()).collect();
            let d = ks_statistic(draws, |eta| (a + 1.0) * eta.powf(a) - a * eta.powf(a + 1.0));
            assert!(d < 0.01, "n={n}: KS {d}");
        }
        assert!(sample_beta(0.0, 2.0, &mut rng).is_err());
    }

    #[test]
    fn epanechnikov_1d_matches_analytic_cdf() {
        let mut rng = RngStream::new(4, 0);
        let mu = DVector::from_vec(vec![0.0]);
        let f = DMatrix::identity(1, 1);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_epanechnikov(&mu, &f, &mut rng).unwrap()[0])
            .collect();
        // density 3/(20√5)(5 − x²) on |x| < √5
        let r = 5f64.sqrt();
        let cdf = |x: f64| {
            let x = x.clamp(-r, r);
            3.0 / (20.0 * r) * (5.0 * x - x.powi(3) / 3.0) + 0.5
        };
        let d = ks_statistic(draws, cdf);
        assert!(d < 0.01, "KS {d}");
    }

    #[test]
    fn epanechnikov_2d_covariance_is_identity() {
        // distinguishes the radial fraction √η from η
        let mut rng = RngStream::new(5, 0);
        let mu = DVector::zeros(2);
        let f = DMatrix::identity(2, 2);
        let draws: Vec<_> = (0..100_000).map(|_| sample_epanechnikov(&mu, &f, &mut rng).unwrap()).collect();
        assert!(draws.iter().all(|x| x.norm_squared() <= 6.0));
        let ens = crate::ensemble::Ensemble::from_columns(2, &draws).unwrap();
        let c = crate::ensemble::ensemble_covariance(&ens).unwrap();
        let err = (c.values() - DMatrix::identity(2, 2)).norm() / 2f64.sqrt();
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn squared_radial_fraction_is_beta() {
        let mut rng = RngStream::new(6, 0);
        for n in [1usize, 3, 6] {
            let mu = DVector::zeros(n);
            let f = DMatrix::identity(n, n);
            let etas: Vec<f64> = (0..100_000)
                .map(|_| sample_epanechnikov(&mu, &f, &mut rng).unwrap().norm_squared() / (n as f64 + 4.0))
                .collect();
            let a = n as f64 / 2.0;
            let d = ks_statistic(etas, |eta| (a + 1.0) * eta.powf(a) - a * eta.powf(a + 1.0));
            assert!(d < 0.01, "n={n}: KS {d}");
        }
    }

    #[test]
    fn radial_quantile_inverts_cdf() {
        for n in [1usize, 2, 7, 40] {
            for p in [0.0, 0.1, 0.5, 0.9545, 1.0] {
                let z = radial_fraction_quantile(n, p).unwrap();
                assert!((radial_fraction_cdf(n, z) - p).abs() < 1e-12);
            }
        }
        // n = 2: F(z) = 2z² − z⁴, median z = √((2 − √2)/2)
        let z = radial_fraction_quantile(2, 0.5).unwrap();
        assert_relative_eq!(z, ((2.0 - 2f64.sqrt()) / 2.0).sqrt(), epsilon = 1e-12);
        assert!(radial_fraction_quantile(2, 1.5).is_err());
    }

    #[test]
    fn grid_uniform_density() {
        let g = GridInverseCdf::build(|_| 0.0, 1024).unwrap();
        for (i, c) in g.cdf_values().iter().enumerate() {
            assert_relative_eq!(*c, i as f64 / 1024.0, epsilon = 1e-12);
        }
        assert_relative_eq!(g.invert(0.37).unwrap(), 0.37, epsilon = 1e-12);
        assert_eq!(g.invert(0.0).unwrap(), 0.0);
        assert_eq!(g.invert(1.0).unwrap(), 1.0);
        assert!(g.invert(-0.1).is_err());
        assert!(g.invert(1.1).is_err());
    }

    #[test]
    fn grid_linear_density() {
        let k = 1024;
        let g = GridInverseCdf::build(|z| (2.0 * z).ln(), k).unwrap();
        assert!((g.invert(0.25).unwrap() - 0.5).abs() < 1.0 / k as f64);
        for u in [0.01, 0.3, 0.77, 0.999] {
            let z = g.invert(u).unwrap();
            assert!((z - u.sqrt()).abs() < 1.0 / k as f64);
            assert!((g.cdf_at(z) - u).abs() < 1.0 / k as f64);
        }
    }

    #[test]
    fn grid_rejects_zero_support() {
        assert!(matches!(
            GridInverseCdf::build(|_| f64::NEG_INFINITY, 128),
            Err(Error::ZeroSupport)
        ));
        assert!(GridInverseCdf::build(|_| 0.0, 10).is_err());
        assert!(GridInverseCdf::build(|_| f64::NAN, 128).is_err());
    }

    #[test]
    fn grid_survives_sharp_log_densities() {
        // a spike of width ~1e-3 around 0.6, far below exp underflow in linear space
        let g = GridInverseCdf::build(|z| -((z - 0.6) / 1e-3).powi(2) / 2.0 - 800.0, 1024).unwrap();
        let med = g.invert(0.5).unwrap();
        assert!((med - 0.6).abs() < 2e-3);
    }

    proptest::proptest! {
        #[test]
        fn grid_cdf_is_monotone(coeffs in proptest::collection::vec(-20.0f64..20.0, 1..6)) {
            let g = GridInverseCdf::build(
                |z| coeffs.iter().enumerate().map(|(p, c)| c * z.powi(p as i32)).sum::<f64>(),
                256,
            ).unwrap();
            let cdf = g.cdf_values();
            proptest::prop_assert_eq!(cdf[0], 0.0);
            proptest::prop_assert_eq!(*cdf.last().unwrap(), 1.0);
            proptest::prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn epanechnikov_draws_stay_in_support(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = RngStream::new(seed, 0);
            let mu = DVector::from_fn(n, |i, _| i as f64);
            let f = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 + i as f64 } else if i > j { 0.3 } else { 0.0 });
            let factor = crate::ensemble::CholeskyFactor::from_lower(f.clone()).unwrap();
            for _ in 0..50 {
                let x = sample_epanechnikov(&mu, &f, &mut rng).unwrap();
                proptest::prop_assert!(factor.mahalanobis_sq(&(x - &mu)) <= n as f64 + 4.0 + 1e-9);
            }
        }
    }
}
