//! Observation operators and realized measurements `y = h(x) + η`, `η ~ 𝒩(0, R)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{spd_factor, CholeskyFactor, SpdMatrix};
use crate::error::{check_dim, Result};

/// A differentiable measurement map `h: ℝⁿ → ℝᵐ`.
pub trait ObservationOperator: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Number of Jacobian evaluations that hit the operator's singular set
    /// and were replaced by zero rows.
    fn singular_jacobians(&self) -> u64 {
        0
    }
}

/// `h(x) = A·x`.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    matrix: DMatrix<f64>,
}

impl LinearOperator {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }
}

impl ObservationOperator for LinearOperator {
    fn state_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// An operator together with its noise covariance and one realized observation.
#[derive(Clone)]
pub struct MeasurementModel {
    operator: Arc<dyn ObservationOperator>,
    noise: SpdMatrix,
    noise_factor: CholeskyFactor,
    /// `−½(ln|R| + m ln 2π)`
    ln_norm: f64,
    observation: DVector<f64>,
}

impl fmt::Debug for MeasurementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasurementModel")
            .field("operator", &self.operator)
            .field("noise", &self.noise)
            .field("observation", &self.observation)
            .finish()
    }
}

impl MeasurementModel {
    pub fn new(
        operator: Arc<dyn ObservationOperator>,
        noise: SpdMatrix,
        observation: DVector<f64>,
    ) -> Result<Self> {
        check_dim(operator.obs_dim(), noise.dim())?;
        check_dim(operator.obs_dim(), observation.len())?;
        let noise_factor = spd_factor(&noise)?;
        let m = noise.dim() as f64;
        let ln_norm = -0.5 * (noise_factor.ln_det() + m * (2.0 * std::f64::consts::PI).ln());
        Ok(Self {
            operator,
            noise,
            noise_factor,
            ln_norm,
            observation,
        })
    }

    /// Same operator and noise, different realized observation.
    pub fn with_observation(&self, observation: DVector<f64>) -> Result<Self> {
        check_dim(self.obs_dim(), observation.len())?;
        Ok(Self {
            observation,
            ..self.clone()
        })
    }

    pub fn operator(&self) -> &Arc<dyn ObservationOperator> {
        &self.operator
    }

    pub fn state_dim(&self) -> usize {
        self.operator.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.operator.obs_dim()
    }

    pub fn h(&self, x: &DVector<f64>) -> DVector<f64> {
        self.operator.apply(x)
    }

    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.operator.jacobian(x)
    }

    pub fn noise(&self) -> &SpdMatrix {
        &self.noise
    }

    pub fn noise_factor(&self) -> &CholeskyFactor {
        &self.noise_factor
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.observation
    }

    /// `ln 𝒩(y; h(x), R)`.
    pub fn ln_likelihood(&self, x: &DVector<f64>) -> f64 {
        let resid = &self.observation - self.h(x);
        self.ln_norm - 0.5 * self.noise_factor.mahalanobis_sq(&resid)
    }

    /// Draws `h(x) + η`, `η ~ 𝒩(0, R)`.
    pub fn simulate<R: rand::Rng + ?Sized>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let eta = crate::sampling::standard_normal_vector(self.obs_dim(), rng);
        self.h(x) + self.noise_factor.mul_vec(&eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_basics() {
        let op = Arc::new(LinearOperator::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0])));
        let m = MeasurementModel::new(op.clone(), SpdMatrix::identity(1), DVector::from_vec(vec![0.5])).unwrap();
        let x = DVector::from_vec(vec![2.0, 1.5]);
        assert_eq!(m.h(&x)[0], 0.5);
        assert!((m.ln_likelihood(&x) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let y = DVector::from_vec(vec![0.3, -1.0]);
        let r = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).unwrap();
        let m2 = MeasurementModel::new(Arc::new(LinearOperator::new(DMatrix::identity(2, 2))), r.clone(), y.clone()).unwrap();
        let direct = crate::kernel_math::gaussian_ln_pdf(&y, &x, &r).unwrap();
        assert!((m2.ln_likelihood(&x) - direct).abs() < 1e-13);
        assert!(MeasurementModel::new(op.clone(), SpdMatrix::identity(2), DVector::zeros(1)).is_err());
        assert!(MeasurementModel::new(op, SpdMatrix::identity(1), DVector::zeros(2)).is_err());
        assert!(m.with_observation(DVector::zeros(3)).is_err());
    }
}
