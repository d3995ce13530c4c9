//! Ensemble moments and the shared dense linear-algebra layer.
//!
//! Every covariance that enters a filter goes through [`SpdMatrix`] and is
//! factorized with [`spd_factor`], which applies a fixed jitter ladder when a
//! plain Cholesky factorization fails.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, invalid, Error, Result};

/// Relative jitter levels tried in order, each scaled by `trace / n`.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// A symmetric matrix that is expected to be positive (semi-)definite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Wraps a square, finite, (numerically) symmetric matrix and symmetrizes it.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(invalid(format!(
                "covariance must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("covariance has non-finite entries"));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let asym = (&values - values.transpose()).amax();
        if asym > 1e-9 * scale {
            return Err(invalid(format!(
                "covariance is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self::symmetrized(values))
    }

    /// Symmetrizes `(A + Aᵀ)/2` without any checks. Used on freshly computed
    /// products that are symmetric up to round-off.
    pub(crate) fn symmetrized(values: DMatrix<f64>) -> Self {
        let sym = (&values + values.transpose()) * 0.5;
        SpdMatrix(sym)
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Returns `c · self`.
    pub fn scaled(&self, c: f64) -> Self {
        SpdMatrix(&self.0 * c)
    }

    /// Returns `self + other`.
    pub fn add(&self, other: &SpdMatrix) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Ok(SpdMatrix(&self.0 + &other.0))
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = Σ (+ jitter·I)`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
    jitter: Option<f64>,
}

impl CholeskyFactor {
    /// Builds a factor from an already lower-triangular matrix with a
    /// strictly positive diagonal.
    pub fn from_lower(lower: DMatrix<f64>) -> Result<Self> {
        if !lower.is_square() {
            return Err(invalid("factor must be square"));
        }
        if lower.diagonal().iter().any(|&d| !(d > 0.0)) {
            return Err(invalid("factor diagonal must be positive"));
        }
        Ok(Self {
            lower: lower.lower_triangle(),
            jitter: None,
        })
    }

    /// Plain Cholesky factorization without jitter; fails on anything that is
    /// not numerically positive definite.
    pub fn strict(cov: &SpdMatrix) -> Result<Self> {
        nalgebra::Cholesky::new(cov.values().clone())
            .map(|c| Self {
                lower: c.unpack(),
                jitter: None,
            })
            .ok_or_else(|| Error::NotPositiveDefinite {
                context: "strict factorization".into(),
                diagonal: cov.values().diagonal().iter().copied().collect(),
            })
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// The absolute jitter added to the diagonal, if the plain factorization failed.
    pub fn jitter(&self) -> Option<f64> {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `L · z`
    pub fn mul_vec(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.lower * z
    }

    /// `L⁻¹ · b`
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has positive diagonal")
    }

    /// `L⁻¹ · B`
    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has positive diagonal")
    }

    /// `Σ⁻¹ · B`
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let half = self.solve_lower_mat(b);
        self.lower
            .tr_solve_lower_triangular(&half)
            .expect("cholesky factor has positive diagonal")
    }

    /// Squared Mahalanobis norm `dᵀ Σ⁻¹ d`.
    pub fn mahalanobis_sq(&self, d: &DVector<f64>) -> f64 {
        self.solve_lower(d).norm_squared()
    }

    /// `Σ = L·Lᵀ`
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// Cholesky factorization with the jitter ladder [`JITTER_LADDER`].
///
/// The jitter scale is `trace/n`, or 1 for an all-zero matrix.
pub fn spd_factor(cov: &SpdMatrix) -> Result<CholeskyFactor> {
    let n = cov.dim();
    if n == 0 {
        return Err(invalid("cannot factor an empty matrix"));
    }
    if let Some(chol) = nalgebra::Cholesky::new(cov.values().clone()) {
        return Ok(CholeskyFactor {
            lower: chol.unpack(),
            jitter: None,
        });
    }
    let mean_diag = cov.trace() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    for eps in JITTER_LADDER {
        let jitter = eps * scale;
        let mut m = cov.values().clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(m) {
            return Ok(CholeskyFactor {
                lower: chol.unpack(),
                jitter: Some(jitter),
            });
        }
    }
    Err(Error::NotPositiveDefinite {
        context: format!("{n}x{n} matrix, trace {:e}", cov.trace()),
        diagonal: cov.values().diagonal().iter().copied().collect(),
    })
}

/// An `n × N` ensemble; columns are particles.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.iter().any(|v| !v.is_finite()) {
            return Err(invalid("ensemble has non-finite entries"));
        }
        Ok(Self { states })
    }

    /// Builds an ensemble from particle vectors of equal length `n`.
    pub fn from_columns(n: usize, columns: &[DVector<f64>]) -> Result<Self> {
        for c in columns {
            check_dim(n, c.len())?;
        }
        if columns.is_empty() {
            return Ok(Self {
                states: DMatrix::zeros(n, 0),
            });
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub fn into_states(self) -> DMatrix<f64> {
        self.states
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Particle count `N`.
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.states.column(i).into_owned()
    }

    pub fn members(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.states.column_iter().map(|c| c.into_owned())
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|v| v.is_finite())
    }
}

pub fn ensemble_mean(ens: &Ensemble) -> Result<DVector<f64>> {
    if ens.is_empty() {
        return Err(invalid("mean of an empty ensemble"));
    }
    Ok(ens.states.column_mean())
}

/// Unbiased sample covariance `X (I − 11ᵀ/N) Xᵀ / (N − 1)`.
pub fn ensemble_covariance(ens: &Ensemble) -> Result<SpdMatrix> {
    let n_particles = ens.len();
    if n_particles < 2 {
        return Err(invalid(format!(
            "covariance needs at least 2 particles, got {n_particles}"
        )));
    }
    let mean = ens.states.column_mean();
    let mut anomalies = ens.states.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let cov = &anomalies * anomalies.transpose() / (n_particles as f64 - 1.0);
    Ok(SpdMatrix::symmetrized(cov))
}

/// Replaces each member by `mean + alpha_inf · (member − mean)`.
pub fn inflate(ens: &Ensemble, alpha_inf: f64) -> Result<Ensemble> {
    if !(alpha_inf >= 1.0) || !alpha_inf.is_finite() {
        return Err(invalid(format!("inflation factor must be >= 1, got {alpha_inf}")));
    }
    if alpha_inf == 1.0 || ens.is_empty() {
        return Ok(ens.clone());
    }
    let mean = ens.states.column_mean();
    let mut states = ens.states.clone();
    for mut col in states.column_iter_mut() {
        let inflated = &mean + (&col - &mean) * alpha_inf;
        col.copy_from(&inflated);
    }
    Ok(Ensemble { states })
}

/// Index distance used to build a localization taper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Cyclic distance `min(|i−j|, n−|i−j|)`.
    Ring,
    /// Plain index distance `|i−j|`.
    Line,
}

impl Topology {
    pub fn distance(self, n: usize, i: usize, j: usize) -> usize {
        let d = i.abs_diff(j);
        match self {
            Topology::Ring => d.min(n - d),
            Topology::Line => d,
        }
    }
}

/// Correlation taper `ρ` for B-localization.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationTaper {
    radius: f64,
    topology: Topology,
    rho: DMatrix<f64>,
}

impl LocalizationTaper {
    /// Wraps an arbitrary taper matrix (symmetric, unit diagonal, entries in `[0, 1]`).
    pub fn from_matrix(rho: DMatrix<f64>) -> Result<Self> {
        if !rho.is_square() {
            return Err(invalid("taper must be square"));
        }
        let n = rho.nrows();
        for i in 0..n {
            if rho[(i, i)] != 1.0 {
                return Err(invalid("taper must have a unit diagonal"));
            }
            for j in 0..n {
                let v = rho[(i, j)];
                if !(0.0..=1.0).contains(&v) || v != rho[(j, i)] {
                    return Err(invalid("taper entries must be symmetric and in [0, 1]"));
                }
            }
        }
        Ok(Self {
            radius: f64::INFINITY,
            topology: Topology::Line,
            rho,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn rho(&self) -> &DMatrix<f64> {
        &self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }
}

/// Gaussian decorrelation taper `ρ_ij = exp(−d(i,j)² / (2r²))`.
pub fn gaussian_taper(n: usize, radius: f64, topology: Topology) -> Result<LocalizationTaper> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid(format!("localization radius must be positive, got {radius}")));
    }
    let two_r2 = 2.0 * radius * radius;
    let rho = DMatrix::from_fn(n, n, |i, j| {
        let d = topology.distance(n, i, j) as f64;
        (-d * d / two_r2).exp()
    });
    Ok(LocalizationTaper {
        radius,
        topology,
        rho,
    })
}

/// Schur product `ρ ∘ Σ`.
pub fn localize(cov: &SpdMatrix, taper: &LocalizationTaper) -> Result<SpdMatrix> {
    check_dim(cov.dim(), taper.dim())?;
    Ok(SpdMatrix::symmetrized(cov.values().component_mul(taper.rho())))
}
