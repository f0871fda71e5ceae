mod common;

use composite_ate::dataset::{Strata, StudyData};
use composite_ate::{cre, sre};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn two_copies_hand_arithmetic() {
    let d = common::doubled_four_rows();
    let f = sre::fit_regression(&d).unwrap();
    assert!((f.tau_sr[0] - 1.0).abs() < 1e-12);
    assert!((f.beta_sr[0] - 0.2).abs() < 1e-12);
    assert!((f.tau_c_sr - 0.2).abs() < 1e-12);
    assert!((f.phi_z - 0.25).abs() < 1e-12);
    assert!((f.phi_y[(0, 0)] - 1.25).abs() < 1e-12);
    assert!((f.phi_yz[0] - 0.25).abs() < 1e-12);
}

#[test]
fn stratification_aggregates_by_size() {
    // Stratum b has equal group means, so its composite is zero.
    let z = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let y = DMatrix::from_column_slice(8, 1, &[2.0, 4.0, 1.0, 3.0, 1.0, 3.0, 3.0, 1.0]);
    let d =
        StudyData::new(z, y, None, Some(Strata::from_labels(&["a", "a", "a", "a", "b", "b", "b", "b"])), None).unwrap();
    let f = sre::fit_stratification(&d).unwrap();
    assert!((f.strata[0].fit.tau_c - 0.2).abs() < 1e-12);
    assert!(f.strata[1].fit.tau_c.abs() < 1e-12);
    assert!((f.tau_c - 0.1).abs() < 1e-12);

    let same = sre::fit_stratification(&common::doubled_four_rows()).unwrap();
    assert!((same.tau_c - 0.2).abs() < 1e-12);
}

#[test]
fn equal_means_within_strata_give_zero() {
    let z = DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let y = DMatrix::from_column_slice(8, 1, &[1.0, 3.0, 3.0, 1.0, 7.0, 9.0, 8.0, 8.0]);
    let d =
        StudyData::new(z, y, None, Some(Strata::from_labels(&[1, 1, 1, 1, 2, 2, 2, 2].map(|v| v.to_string()))), None)
            .unwrap();
    let f = sre::fit_regression(&d).unwrap();
    assert!(f.tau_sr.amax() < 1e-12 && f.beta_sr.amax() < 1e-12);
    assert!(sre::wald_test_sr(&f, &d).unwrap().statistic.abs() < 1e-20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn single_stratum_matches_cre(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        sh.s = 1;
        let d = common::random_study(&mut rng, sh);
        let (r, c) = (sre::fit_regression(&d).unwrap(), cre::fit(&d).unwrap());
        prop_assert!((&r.beta_sr - &c.beta).amax() <= 1e-10 * c.beta.amax().max(1.0));
        prop_assert!((&r.tau_sr - &c.tau).amax() <= 1e-10 * c.tau.amax().max(1.0));
        prop_assert!((r.tau_c_sr - c.tau_c).abs() < 1e-10);
        prop_assert!(common::rel(sre::variance_normal_sr(&r, &d), cre::variance_normal(&c, &d)) < 1e-8);
        let st = sre::fit_stratification(&d).unwrap();
        prop_assert!((st.tau_c - c.tau_c).abs() < 1e-10);
    }

    #[test]
    fn stratified_composite_is_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let mut sh = common::Shape::random(&mut rng);
        sh.k = 0;
        let d = common::random_study(&mut rng, sh);
        let omega = common::normal_matrix(&mut rng, sh.l, sh.l) + DMatrix::identity(sh.l, sh.l) * 2.0;
        prop_assume!(omega.determinant().abs() > 0.1);
        let d2 = d.with_outcomes(d.y() * omega.transpose()).unwrap();
        let (a, b) = (sre::fit_regression(&d).unwrap(), sre::fit_regression(&d2).unwrap());
        prop_assert!(common::rel(a.tau_c_sr, b.tau_c_sr) < 1e-8);
        prop_assert!(a.tau_c_sr >= 0.0 && a.tau_c_sr < 1.0);
        let (sa, sb) = (sre::fit_stratification(&d).unwrap(), sre::fit_stratification(&d2).unwrap());
        prop_assert!(common::rel(sa.tau_c, sb.tau_c) < 1e-8);
    }
}
