mod common;

use composite_ate::dataset::StudyData;
use composite_ate::numkernel::sym_eigen;
use composite_ate::obs::{self, WeightSource};
use composite_ate::{cre, Error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn toy_weighted() -> StudyData {
    let d = common::four_rows();
    d.with_user_weights(DVector::from_element(4, 2.0)).unwrap()
}

#[test]
fn half_propensity_reduces_to_cre_arithmetic() {
    let f = obs::fit(&toy_weighted(), WeightSource::User).unwrap();
    assert!(f.weights.iter().all(|&w| w == 2.0));
    assert!((f.tau_os[0] - 1.0).abs() < 1e-12);
    assert!((f.beta_os[0] - 0.2).abs() < 1e-12);
    assert!((f.tau_c_os - 0.2).abs() < 1e-12);
    assert!((f.phi_zz - 0.5).abs() < 1e-12);
    assert!((f.phi_yy[(0, 0)] - 2.5).abs() < 1e-12);
    let v = obs::variance_normal_os(&f).unwrap();
    assert!(v.is_finite() && v >= 0.0);
}

#[test]
fn equal_weighted_means_give_zero() {
    let z = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
    let y = DMatrix::from_column_slice(4, 1, &[1.0, 3.0, 3.0, 1.0]);
    let d = StudyData::new(z, y, None, None, Some(DVector::from_vec(vec![2.0, 2.0, 3.0, 3.0]))).unwrap();
    let f = obs::fit(&d, WeightSource::User).unwrap();
    assert!(f.tau_os.amax() < 1e-12 && f.beta_os.amax() < 1e-12);
    assert!(obs::wald_test_os(&f).unwrap().statistic.abs() < 1e-20);
}

#[test]
fn treatment_linear_in_outcomes_gives_zero_scores() {
    let mut rng = common::rng(2);
    let n = 30;
    let z = DVector::from_fn(n, |i, _| (i % 2) as f64);
    let mut y = common::normal_matrix(&mut rng, n, 2);
    y.set_column(0, &z.map(|v| 3.0 * v - 1.0));
    let w = DVector::from_fn(n, |_, _| 1.0 + rng.random::<f64>());
    let d = StudyData::new(z, y, None, None, Some(w)).unwrap();
    let f = obs::fit(&d, WeightSource::User).unwrap();
    assert!(obs::psi_terms(&f).unwrap().amax() < 1e-10);
}

#[test]
fn orthogonal_covariate_gives_marginal_propensity() {
    let z = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let x = DMatrix::from_column_slice(6, 1, &[1.0, -1.0, 1.0, -1.0, 0.0, 0.0]);
    let y = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 0.5, 3.0, 2.0, 1.0]);
    let d = StudyData::new(z, y, Some(x), None, None).unwrap();
    let p = obs::fit_propensity(&d).unwrap();
    assert!(p.alpha.amax() < 1e-10, "{}", p.alpha);
    assert!(p.weights.iter().all(|&w| (w - 2.0).abs() < 1e-10));
}

#[test]
fn perfectly_predicting_covariate_is_separation() {
    let z = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    let x = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
    let y = DMatrix::from_column_slice(6, 1, &[1.0, 2.0, 0.5, 3.0, 2.0, 1.0]);
    let d = StudyData::new(z, y, Some(x), None, None).unwrap();
    let err = obs::fit_propensity(&d).unwrap_err();
    assert!(matches!(err, Error::Separation(_)), "{err}");
}

#[test]
fn propensity_is_consistent() {
    let mut rng = common::rng(99);
    let n = 100_000;
    let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let z = DVector::from_fn(n, |i, _| {
        let p = 1.0 / (1.0 + (-0.5 * x[(i, 0)]).exp());
        if rng.random::<f64>() < p {
            1.0
        } else {
            0.0
        }
    });
    let y = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = StudyData::new(z, y, Some(x), None, None).unwrap();
    let p = obs::fit_propensity(&d).unwrap();
    assert!(p.alpha[0].abs() < 0.03 && (p.alpha[1] - 0.5).abs() < 0.03, "{}", p.alpha);
}

#[test]
fn estimate_without_covariates_is_invalid() {
    let err = obs::fit(&toy_weighted(), WeightSource::Estimate).unwrap_err();
    assert!(err.is_validation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_weights_match_cre(seed in any::<u64>(), c in 0.5f64..8.0) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        sh.s = 1;
        let d = common::random_study(&mut rng, sh);
        let dw = d.with_user_weights(DVector::from_element(d.n(), c)).unwrap();
        let (o, f) = (obs::fit(&dw, WeightSource::User).unwrap(), cre::fit(&d).unwrap());
        prop_assert!(common::rel(o.tau_c_os, f.tau_c) < 1e-10);
        let (vo, vc) = (obs::variance_normal_os(&o).unwrap(), cre::variance_normal(&f, &d));
        prop_assert!(common::rel(vo, vc) < 1e-8, "{} vs {}", vo, vc);
        let a = sym_eigen(&obs::gamma_matrix_os(&o).unwrap()).unwrap().lambdas;
        let b = sym_eigen(&cre::gamma_matrix(&f, &d).unwrap()).unwrap().lambdas;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(common::rel(*x, *y) < 1e-8);
        }
        let (wo, wc) = (obs::wald_test_os(&o).unwrap(), cre::wald_test(&f, &d).unwrap());
        prop_assert!(common::rel(wo.statistic, wc.statistic) < 1e-8);
    }

    #[test]
    fn estimated_weights_composite_is_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = sh.k.max(1);
        sh.s = 1;
        sh.confounded = true;
        let d = common::random_study(&mut rng, sh);
        let omega = common::normal_matrix(&mut rng, sh.l, sh.l) + DMatrix::identity(sh.l, sh.l) * 2.0;
        prop_assume!(omega.determinant().abs() > 0.1);
        let d2 = d.with_outcomes(d.y() * omega.transpose()).unwrap();
        let a = obs::fit(&d, WeightSource::Estimate);
        let b = obs::fit(&d2, WeightSource::Estimate);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!(common::rel(a.tau_c_os, b.tau_c_os) < 1e-8);
                prop_assert!(a.tau_c_os >= 0.0 && a.tau_c_os < 1.0);
                let (va, vb) = (obs::variance_normal_os(&a).unwrap(), obs::variance_normal_os(&b).unwrap());
                prop_assert!(common::rel(va, vb) < 1e-8);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.kind(), b.kind()),
            (a, b) => prop_assert!(false, "only one side failed: {:?} / {:?}", a.err(), b.err()),
        }
    }
}
