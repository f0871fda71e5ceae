mod common;

use composite_ate::covadj::{self, RChoice};
use composite_ate::dataset::StudyData;
use composite_ate::numkernel::{ols, sym_eigen};
use composite_ate::obs::{self, WeightSource};
use composite_ate::{cre, sre, Error};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn random(seed: u64, k: usize, s: usize) -> StudyData {
    let mut rng = common::rng(seed);
    let mut sh = common::Shape::random(&mut rng);
    sh.k = k;
    sh.s = s;
    common::random_study(&mut rng, sh)
}

#[test]
fn duplicated_outcome_as_covariate_is_rank_deficient() {
    let d = random(1, 0, 1);
    let x = d.y().columns(0, 1).into_owned();
    let dx = StudyData::new(d.z().clone(), d.y().clone(), Some(x), None, None).unwrap();
    let err = covadj::fit_cre_adjusted(&dx).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
}

/// Residualize random covariates on (1, z, y) so they are orthogonal to
/// everything in-sample.
fn with_inert_covariates(d: &StudyData, seed: u64) -> StudyData {
    let mut rng = common::rng(seed);
    let raw = common::normal_matrix(&mut rng, d.n(), 2);
    let mut basis = DMatrix::zeros(d.n(), 1 + d.l());
    basis.set_column(0, d.z());
    basis.columns_mut(1, d.l()).copy_from(d.y());
    let mut x = raw.clone();
    for j in 0..2 {
        x.set_column(j, &ols(&raw.column(j).into_owned(), &basis, true).unwrap().residuals);
    }
    StudyData::new(d.z().clone(), d.y().clone(), Some(x), None, None).unwrap()
}

#[test]
fn inert_covariate_leaves_composite_unchanged() {
    let d = random(2, 0, 1);
    let a = covadj::fit_cre_adjusted(&with_inert_covariates(&d, 3)).unwrap();
    let c = cre::fit(&d).unwrap();
    assert!((a.tau_c_a - c.tau_c).abs() < 1e-8);
}

#[test]
fn duplicated_rows_leave_adjusted_variance_unchanged() {
    let d = random(4, 2, 1);
    let rows: Vec<usize> = (0..d.n()).chain(0..d.n()).collect();
    let dd = d.subset(&rows).unwrap();
    let (a, b) = (covadj::fit_cre_adjusted(&d).unwrap(), covadj::fit_cre_adjusted(&dd).unwrap());
    let (va, vb) = (covadj::variance_cre_adjusted(&a, &d), covadj::variance_cre_adjusted(&b, &dd));
    assert!(common::rel(va, vb) < 1e-10);
}

#[test]
fn sre_adjusted_r_zero_is_outcome_composite() {
    let d = random(5, 2, 3);
    let f = covadj::fit_sre_adjusted(&d, RChoice::Fixed(0.0)).unwrap();
    assert_eq!(f.tau_c, f.tau_c_y);
    let g = covadj::fit_sre_adjusted(&d, RChoice::Fixed(-1.0)).unwrap();
    assert!((g.tau_c - (g.tau_c_y + g.tau_c_x)).abs() < 1e-14);
    assert!(g.tau_c >= 0.0 && g.tau_c < 1.0);
    let o = covadj::fit_sre_adjusted(&d, RChoice::Opt).unwrap();
    assert_eq!(o.r_opt_hat, Some(o.r_used));
}

#[test]
fn covariate_constant_within_strata_is_rank_deficient() {
    let d = random(6, 0, 3);
    let x = DMatrix::from_fn(d.n(), 1, |i, _| d.stratum_index()[i] as f64 * 1.5);
    let dx = StudyData::new(d.z().clone(), d.y().clone(), Some(x), d.strata().cloned(), None).unwrap();
    let err = covadj::fit_sre_adjusted(&dx, RChoice::Fixed(0.0)).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }), "{err}");
}

#[test]
fn adjusted_observational_without_covariates_is_obs() {
    let d = random(7, 0, 1);
    let dw = d.with_user_weights(DVector::from_fn(d.n(), |i, _| 1.5 + (i % 3) as f64)).unwrap();
    let a = covadj::fit_obs_adjusted(&dw, WeightSource::User).unwrap();
    let b = obs::fit(&dw, WeightSource::User).unwrap();
    assert!((a.tau_c_os - b.tau_c_os).abs() < 1e-12);
    let (va, vb) = (obs::variance_normal_os(&a).unwrap(), obs::variance_normal_os(&b).unwrap());
    assert!(common::rel(va, vb) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn no_covariates_reduce_to_cre(seed in any::<u64>()) {
        let d = random(seed, 0, 1);
        let (a, c) = (covadj::fit_cre_adjusted(&d).unwrap(), cre::fit(&d).unwrap());
        prop_assert!((a.tau_c_a - c.tau_c).abs() < 1e-10);
        prop_assert!(common::rel(covadj::variance_cre_adjusted(&a, &d), cre::variance_normal(&c, &d)) < 1e-8);
        let ga = sym_eigen(&covadj::gamma_matrix_cre_adjusted(&a).unwrap()).unwrap().lambdas;
        let gc = sym_eigen(&cre::gamma_matrix(&c, &d).unwrap()).unwrap().lambdas;
        for (x, y) in ga.iter().zip(&gc) {
            prop_assert!(common::rel(*x, *y) < 1e-8);
        }
    }

    #[test]
    fn sre_adjusted_without_covariates_is_sre(seed in any::<u64>(), s in 1usize..4) {
        let d = random(seed, 0, s);
        let a = covadj::fit_sre_adjusted(&d, RChoice::Fixed(0.0)).unwrap();
        let b = sre::fit_regression(&d).unwrap();
        prop_assert!((a.tau_c - b.tau_c_sr).abs() < 1e-10);
        let va = covadj::variance_sre_adjusted(&a, &d, 0.0).unwrap();
        prop_assert!(common::rel(va, sre::variance_normal_sr(&b, &d)) < 1e-8);
        if s == 1 {
            let c = cre::fit(&d).unwrap();
            prop_assert!(common::rel(va, cre::variance_normal(&c, &d)) < 1e-8);
        }
    }

    #[test]
    fn constant_weights_match_cre_adjusted(seed in any::<u64>(), c in 0.5f64..5.0) {
        let d = random(seed, 2, 1);
        let dw = d.with_user_weights(DVector::from_element(d.n(), c)).unwrap();
        let o = covadj::fit_obs_adjusted(&dw, WeightSource::User).unwrap();
        let a = covadj::fit_cre_adjusted(&d).unwrap();
        prop_assert!(common::rel(o.tau_c_os, a.tau_c_a) < 1e-8);

        let di = with_inert_covariates(&random(seed, 0, 1), seed);
        let dw = di.with_user_weights(DVector::from_element(di.n(), c)).unwrap();
        let o = covadj::fit_obs_adjusted(&dw, WeightSource::User).unwrap();
        let a = covadj::fit_cre_adjusted(&di).unwrap();
        prop_assert!(common::rel(o.tau_c_os, a.tau_c_a) < 1e-8);
        let (vo, va) = (obs::variance_normal_os(&o).unwrap(), covadj::variance_cre_adjusted(&a, &di));
        prop_assert!(common::rel(vo, va) < 1e-8, "{} vs {}", vo, va);
    }

    #[test]
    fn adjusted_composite_is_invariant(seed in any::<u64>()) {
        let mut rng = common::rng(seed ^ 0xabc);
        let d = random(seed, 2, 2);
        let l = d.l();
        let omega = common::normal_matrix(&mut rng, l, l) + DMatrix::identity(l, l) * 2.0;
        prop_assume!(omega.determinant().abs() > 0.1);
        let d2 = d.with_outcomes(d.y() * omega.transpose()).unwrap();
        let (a, b) = (covadj::fit_cre_adjusted(&d).unwrap(), covadj::fit_cre_adjusted(&d2).unwrap());
        prop_assert!(common::rel(a.tau_c_a, b.tau_c_a) < 1e-8);
        let (a, b) = (
            covadj::fit_sre_adjusted(&d, RChoice::Fixed(0.0)).unwrap(),
            covadj::fit_sre_adjusted(&d2, RChoice::Fixed(0.0)).unwrap(),
        );
        prop_assert!(common::rel(a.tau_c, b.tau_c) < 1e-8);
    }
}
