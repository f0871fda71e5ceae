mod common;

use composite_ate::cre;
use composite_ate::dataset::StudyData;
use composite_ate::numkernel::sym_eigen;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn four_row_hand_arithmetic() {
    let d = common::four_rows();
    let f = cre::fit(&d).unwrap();
    assert!((f.tau[0] - 1.0).abs() < 1e-12);
    assert!((f.beta[0] - 0.2).abs() < 1e-12);
    assert!((f.tau_c - 0.2).abs() < 1e-12);
    assert!((f.sigma_hat[(0, 0)] - 4.0).abs() < 1e-12);
    // Rank-one form tau^2 s_zz / (s_yy) with s_zz = 0.25, s_yy = 1.25.
    assert!((f.tau_c - 0.25 / 1.25).abs() < 1e-12);
}

#[test]
fn equal_group_means_give_zero_composite() {
    let z = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let y = DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 3.0, 5.0, 3.0, 2.0, 1.0, 4.0, 2.0, 1.0, 2.0, 0.0]);
    let d = StudyData::new(z, y, None, None, None).unwrap();
    let f = cre::fit(&d).unwrap();
    assert!(f.tau.amax() < 1e-12);
    assert!(f.beta.amax() < 1e-12);
    assert!(f.tau_c.abs() < 1e-12);
    let w = cre::wald_test(&f, &d).unwrap();
    assert!(w.statistic.abs() < 1e-20);
    assert!((w.p_value - 1.0).abs() < 1e-12);
}

#[test]
fn duplicated_rows_leave_inference_unchanged() {
    let mut rng = common::rng(11);
    let d =
        common::random_study(&mut rng, common::Shape { n: 60, l: 3, k: 0, s: 1, confounded: false, weights: false });
    let rows: Vec<usize> = (0..d.n()).chain(0..d.n()).collect();
    let dd = d.subset(&rows).unwrap();
    let (f, ff) = (cre::fit(&d).unwrap(), cre::fit(&dd).unwrap());
    assert!(common::rel(f.tau_c, ff.tau_c) < 1e-10);
    assert!(common::rel(cre::variance_normal(&f, &d), cre::variance_normal(&ff, &dd)) < 1e-10);
    let a = sym_eigen(&cre::gamma_matrix(&f, &d).unwrap()).unwrap().lambdas;
    let b = sym_eigen(&cre::gamma_matrix(&ff, &dd).unwrap()).unwrap().lambdas;
    for (x, y) in a.iter().zip(&b) {
        assert!(common::rel(*x, *y) < 1e-10);
    }
}

#[test]
fn single_outcome_null_spectrum_is_near_one() {
    let mut rng = common::rng(5);
    let n = 10_000;
    let z = DVector::from_fn(n, |_, _| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
    let y = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = StudyData::new(z, y, None, None, None).unwrap();
    let f = cre::fit(&d).unwrap();
    let law = cre::gamma_null(&f, &d).unwrap();
    assert_eq!(law.lambdas().len(), 1);
    assert!((law.lambdas()[0] - 1.0).abs() < 0.05, "lambda = {}", law.lambdas()[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_is_invariant_to_linear_outcome_maps(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        sh.s = 1;
        let d = common::random_study(&mut rng, sh);
        let omega = common::normal_matrix(&mut rng, sh.l, sh.l) + DMatrix::identity(sh.l, sh.l) * 2.0;
        prop_assume!(omega.determinant().abs() > 0.1);
        let d2 = d.with_outcomes(d.y() * omega.transpose()).unwrap();
        let (a, b) = (cre::fit(&d).unwrap(), cre::fit(&d2).unwrap());
        prop_assert!(common::rel(a.tau_c, b.tau_c) < 1e-8);
        let (wa, wb) = (cre::wald_test(&a, &d).unwrap(), cre::wald_test(&b, &d2).unwrap());
        prop_assert!(common::rel(wa.statistic, wb.statistic) < 1e-8);
        prop_assert!(common::rel(cre::variance_normal(&a, &d), cre::variance_normal(&b, &d2)) < 1e-8);
    }

    #[test]
    fn composite_lies_in_unit_interval(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        sh.s = 1;
        let d = common::random_study(&mut rng, sh);
        let f = cre::fit(&d).unwrap();
        prop_assert!(f.tau_c >= 0.0 && f.tau_c < 1.0);
        prop_assert!(cre::variance_normal(&f, &d) >= 0.0);
        let lam = sym_eigen(&cre::gamma_matrix(&f, &d).unwrap()).unwrap().lambdas;
        prop_assert!(lam.iter().all(|&l| l > -1e-10));
    }

    #[test]
    fn outcome_scaling_keeps_wald(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        sh.s = 1;
        let d = common::random_study(&mut rng, sh);
        let d10 = d.with_outcomes(d.y() * 10.0).unwrap();
        let a = cre::wald_test(&cre::fit(&d).unwrap(), &d).unwrap();
        let b = cre::wald_test(&cre::fit(&d10).unwrap(), &d10).unwrap();
        prop_assert!(common::rel(a.statistic, b.statistic) < 1e-8);
    }
}
