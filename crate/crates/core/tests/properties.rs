use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::RngCore;

use enemf::ensemble::{ensemble_covariance, ensemble_mean, inflate, Ensemble, SpdMatrix};
use enemf::filters::{analyze, FilterConfig};
use enemf::harness::spatial_rmse;
use enemf::kernel_math::{amise, amise_at_optimal, bandwidth, gaussian_efficiency, kernel_constants, optimal_bandwidth, KernelKind};
use enemf::measurement::{LinearOperator, MeasurementModel};
use enemf::mixture::{bruf_component_update, ekf_component_update, MixtureComponent, NormalizedWeights, UpdateVariant, UtParams};
use enemf::models::{banana_measurement, finite_difference_jacobian, l96_measurement, Lorenz96};
use enemf::sampling::RngStream;

fn matrix(n: usize, m: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_iterator(n, m, v.iter().copied().cycle().take(n * m))
}

fn spd(n: usize, v: &[f64]) -> SpdMatrix {
    let a = matrix(n, n, v);
    SpdMatrix::new(&a * a.transpose() + DMatrix::identity(n, n) * 0.3).unwrap()
}

fn linear_model(h: DMatrix<f64>, r: SpdMatrix, y: DVector<f64>) -> MeasurementModel {
    MeasurementModel::new(Arc::new(LinearOperator::new(h)), r, y).unwrap()
}

fn entries() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, 64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaussian_efficiency_decreases(n in 1usize..60) {
        let a = gaussian_efficiency(n).unwrap();
        let b = gaussian_efficiency(n + 1).unwrap();
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(b < a);
    }

    #[test]
    fn amise_closed_form_matches(n in 1usize..=10, n_particles in 2usize..5000, gauss in any::<bool>()) {
        let kind = if gauss { KernelKind::Gaussian } else { KernelKind::Epanechnikov };
        let c = kernel_constants(kind, n).unwrap();
        let h = optimal_bandwidth(&c, n_particles).unwrap();
        let direct = amise(&c, h, n_particles);
        prop_assert!((direct - amise_at_optimal(&c, n_particles)).abs() / direct < 1e-12);
    }

    #[test]
    fn large_dimensions_stay_finite(n in 1usize..=1000, n_particles in 2usize..100_000) {
        let e = gaussian_efficiency(n).unwrap();
        prop_assert!(e.is_finite() && e >= 0.0);
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let h = bandwidth(kind, n, n_particles).unwrap();
            prop_assert!(h.is_finite() && h > 0.0);
        }
    }

    #[test]
    fn streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let mut a = RngStream::new(seed, stream);
        let mut b = RngStream::new(seed, stream);
        for _ in 0..16 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn covariance_is_affine_equivariant(n in 1usize..=4, v in entries(), shift in -5.0f64..5.0) {
        let x = matrix(n, 9, &v);
        let a = matrix(n, n, &v[7..]);
        let ens = Ensemble::new(x.clone()).unwrap();
        let moved = Ensemble::new(&a * &x + DMatrix::from_element(n, 9, shift)).unwrap();
        let expected = &a * ensemble_covariance(&ens).unwrap().values() * a.transpose();
        let got = ensemble_covariance(&moved).unwrap();
        prop_assert!((got.values() - &expected).norm() <= 1e-10 * (1.0 + expected.norm()));
    }

    #[test]
    fn inflation_keeps_mean(n in 1usize..=5, v in entries(), alpha in 1.0f64..3.0) {
        let ens = Ensemble::new(matrix(n, 7, &v)).unwrap();
        let before = ensemble_mean(&ens).unwrap();
        let after = ensemble_mean(&inflate(&ens, alpha).unwrap()).unwrap();
        prop_assert!((before - after).amax() < 1e-13);
    }

    #[test]
    fn normalized_weights_sum_to_one(logs in proptest::collection::vec(-800.0f64..50.0, 1..40)) {
        let w = NormalizedWeights::from_log(logs).weights();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn linear_updates_shrink_and_agree(n in 1usize..=4, m in 1usize..=3, v in entries(), iterations in 1usize..=10) {
        let p = spd(n, &v);
        let r = spd(m, &v[5..]);
        let meas = linear_model(matrix(m, n, &v[11..]), r, DVector::from_iterator(m, v[20..].iter().copied().take(m)));
        let comp = MixtureComponent::new(DVector::from_iterator(n, v[30..].iter().copied().take(n)), p.clone()).unwrap();
        let ekf = ekf_component_update(&comp, &meas).unwrap();
        prop_assert!(ekf.cov.trace() <= p.trace() * (1.0 + 1e-12));
        let bruf = bruf_component_update(&comp, &meas, iterations).unwrap();
        prop_assert!((&bruf.mean - &ekf.mean).norm() <= 1e-10 * (1.0 + ekf.mean.norm()));
        prop_assert!((bruf.cov.values() - ekf.cov.values()).norm() <= 1e-10 * ekf.cov.values().norm());
    }

    #[test]
    fn jacobians_match_finite_differences(v in proptest::collection::vec(-8.0f64..12.0, 40)) {
        let x = DVector::from_vec(v);
        let l96 = l96_measurement(40).unwrap();
        let banana = banana_measurement(40).unwrap();
        for meas in [&l96, &banana] {
            let fd = finite_difference_jacobian(meas.operator().as_ref(), &x, 1e-6).unwrap();
            let exact = meas.jacobian(&x);
            prop_assert!((&fd - &exact).amax() <= 1e-5 * (1.0 + exact.amax()));
        }
    }

    #[test]
    fn ut_weight_identities(n in 1usize..=60) {
        let p = UtParams::default();
        let w = p.weights(n).unwrap();
        let others = 2.0 * n as f64 * w.other;
        prop_assert!((w.mean0 + others - 1.0).abs() < 1e-12);
        let expected = 1.0 + (1.0 - p.alpha_ut * p.alpha_ut + p.beta_ut);
        prop_assert!((w.cov0 + others - expected).abs() < 1e-12);
    }

    #[test]
    fn lorenz_rhs_is_shift_equivariant(v in proptest::collection::vec(-10.0f64..10.0, 40), k in 1usize..40) {
        let l96 = Lorenz96::default();
        let x = DVector::from_vec(v);
        let shift = |z: &DVector<f64>| DVector::from_fn(40, |i, _| z[(i + k) % 40]);
        prop_assert_eq!(l96.rhs(&shift(&x)), shift(&l96.rhs(&x)));
    }

    #[test]
    fn rmse_is_a_norm(v in entries(), w in entries()) {
        let a: Vec<DVector<f64>> = v.chunks(4).map(|c| DVector::from_column_slice(c)).collect();
        let b: Vec<DVector<f64>> = w.chunks(4).map(|c| DVector::from_column_slice(c)).collect();
        prop_assert_eq!(spatial_rmse(&a, &a).unwrap(), 0.0);
        let d = spatial_rmse(&a, &b).unwrap();
        prop_assert!(d >= 0.0 && (d - spatial_rmse(&b, &a).unwrap()).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn filters_keep_shape_and_finiteness(n in 1usize..=4, v in entries(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let cols: Vec<DVector<f64>> = (0..12)
            .map(|i| DVector::from_fn(n, |j, _| v[(i * 5 + j) % v.len()] + (rng.next_u32() % 100) as f64 / 100.0))
            .collect();
        let ens = Ensemble::from_columns(n, &cols).unwrap();
        let meas = linear_model(matrix(2, n, &v[3..]), SpdMatrix::identity(2), DVector::from_vec(vec![0.5, -0.5]));
        for cfg in [
            FilterConfig::enkf(1.02),
            FilterConfig::engmf(UpdateVariant::Ekf),
            FilterConfig::enemf_gaussian(0.4, UpdateVariant::Bruf(3)),
            FilterConfig::enemf_unscented(0.5, UpdateVariant::Ekf),
        ] {
            let out = analyze(&ens, &meas, &cfg, &mut RngStream::new(seed, 1)).unwrap();
            prop_assert_eq!(out.posterior.dim(), n);
            prop_assert_eq!(out.posterior.len(), 12);
            prop_assert!(out.posterior.is_finite());
        }
    }
}
