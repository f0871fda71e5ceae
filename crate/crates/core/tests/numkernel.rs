mod common;

use composite_ate::numkernel::*;
use composite_ate::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn col(x: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.len(), 1, x)
}

#[test]
fn ols_on_treatment_gives_group_means() {
    let fit = ols(&v(&[2.0, 4.0, 1.0, 3.0]), &col(&[1.0, 1.0, 0.0, 0.0]), true).unwrap();
    assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
    assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
    assert!((fit.residuals - v(&[-1.0, 1.0, -1.0, 1.0])).amax() < 1e-12);
}

#[test]
fn ols_exact_fit_has_zero_residuals() {
    let x = col(&[0.3, -1.2, 2.5, 0.7, 1.1]);
    let fit = ols(&x.column(0).into_owned(), &x, true).unwrap();
    assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
    assert!(fit.residuals.amax() < 1e-12);
}

#[test]
fn duplicated_predictor_is_rank_deficient() {
    let x = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 0.5, 3.0, 1.0, 2.0, 0.5, 3.0]);
    let err = ols(&v(&[1.0, 0.0, 2.0, 1.0]), &x, true).unwrap_err();
    assert!(matches!(err, Error::RankDeficient { .. }), "{err:?}");
}

#[test]
fn constant_weights_reproduce_ols() {
    let y = v(&[2.0, 4.0, 1.0, 3.0]);
    let z = col(&[1.0, 1.0, 0.0, 0.0]);
    let w = wls(&y, &z, &DVector::from_element(4, 2.0), true).unwrap();
    let o = ols(&y, &z, true).unwrap();
    assert!((w.coefficients[1] - 1.0).abs() < 1e-12);
    assert!((w.coefficients - o.coefficients).amax() < 1e-12);
}

#[test]
fn nonpositive_weight_is_rejected() {
    let err = wls(&v(&[2.0, 4.0, 1.0, 3.0]), &col(&[1.0, 1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 1.0, 1.0]), true).unwrap_err();
    assert!(matches!(err, Error::NonPositiveWeight { index: 1 }));
}

#[test]
fn partial_out_strata_examples() {
    let y = col(&[2.0, 4.0, 1.0, 3.0, 2.0, 4.0, 1.0, 3.0]);
    let r = partial_out_strata(&y, &[0, 0, 0, 0, 1, 1, 1, 1]);
    let want = [-0.5, 1.5, -1.5, 0.5, -0.5, 1.5, -1.5, 0.5];
    assert!((r.column(0) - v(&want)).amax() < 1e-12);

    let one = partial_out_strata(&y, &[0; 8]);
    assert!((one.column(0) - v(&want)).amax() < 1e-12);

    let c = col(&[5.0, 5.0, -1.0, -1.0]);
    assert!(partial_out_strata(&c, &[0, 0, 1, 1]).amax() < 1e-12);
}

#[test]
fn eigen_examples() {
    let e = sym_eigen(&DMatrix::identity(3, 3)).unwrap();
    assert_eq!(e.lambdas, vec![1.0, 1.0, 1.0]);
    let e = sym_eigen(&DMatrix::from_diagonal(&v(&[1.0, 4.0]))).unwrap();
    assert_eq!(e.lambdas, vec![4.0, 1.0]);
    assert!((e.basis.abs() - DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).amax() < 1e-12);
}

#[test]
fn inv_sqrt_examples() {
    let m = inv_sqrt_psd(&DMatrix::from_diagonal(&v(&[4.0, 9.0]))).unwrap();
    assert!((m - DMatrix::from_diagonal(&v(&[0.5, 1.0 / 3.0]))).amax() < 1e-12);
    let m = inv_sqrt_psd(&DMatrix::from_element(1, 1, 1.25)).unwrap();
    assert!((m[(0, 0)] - 0.894427191).abs() < 1e-9);
    let m = inv_sqrt_psd(&DMatrix::identity(3, 3)).unwrap();
    assert!((m - DMatrix::identity(3, 3)).amax() < 1e-12);
}

fn sym_strategy(dim: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, dim * dim).prop_map(move |xs| {
        let a = DMatrix::from_vec(dim, dim, xs);
        (&a + a.transpose()) * 0.5
    })
}

proptest! {
    #[test]
    fn eigen_reconstructs(a in sym_strategy(5)) {
        let e = sym_eigen(&a).unwrap();
        let back = e.reconstruct_with(|l| l);
        prop_assert!((back - &a).amax() <= 1e-10 * a.amax().max(1.0));
        prop_assert!(e.lambdas.windows(2).all(|w| w[0] >= w[1]));
        let q = &e.basis;
        prop_assert!((q.transpose() * q - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn inv_sqrt_whitens_pd(seed in any::<u64>(), dim in 1usize..6) {
        let mut rng = common::rng(seed);
        let b = common::normal_matrix(&mut rng, dim + 3, dim);
        let a = b.tr_mul(&b) + DMatrix::identity(dim, dim) * 0.1;
        let m = inv_sqrt_psd(&a).unwrap();
        prop_assert!((&m * &a * &m - DMatrix::identity(dim, dim)).amax() < 1e-8);
        prop_assert!((&m - m.transpose()).amax() < 1e-12);
    }

    #[test]
    fn wls_matches_row_scaled_ols(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = 30;
        let x = common::normal_matrix(&mut rng, n, 2);
        let y = common::normal_matrix(&mut rng, n, 1).column(0).into_owned();
        let w = common::normal_matrix(&mut rng, n, 1).column(0).map(|g| g.exp());
        let fit = wls(&y, &x, &w, true).unwrap();
        // Weighted normal equations: D' W r = 0.
        let d = with_intercept(&x);
        let score = d.tr_mul(&fit.residuals.component_mul(&w));
        prop_assert!(score.amax() < 1e-9);
    }

    #[test]
    fn partialled_columns_have_zero_stratum_means(seed in any::<u64>(), s in 1usize..5) {
        let mut rng = common::rng(seed);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + i / 3) % s).collect();
        let m = common::normal_matrix(&mut rng, n, 3);
        let r = partial_out_strata(&m, &labels);
        let means = stratum_means(&r, &labels, s);
        prop_assert!(means.amax() < 1e-12);
    }
}
