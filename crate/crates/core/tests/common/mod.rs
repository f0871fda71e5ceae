//! Random study generators shared by the integration tests.
#![allow(dead_code)]

use composite_ate::dataset::{Strata, StudyData};
use composite_ate::logistic::sigmoid;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Shape of a random study.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub s: usize,
    /// Draw treatment from a covariate-dependent propensity.
    pub confounded: bool,
    /// Attach true inverse-propensity weights.
    pub weights: bool,
}

impl Shape {
    /// Random shape with n in [20, 200], L in [1, 5], K in [0, 3], S in [1, 4],
    /// enlarged so every stratum-arm cell can carry its own fit.
    pub fn random(rng: &mut impl Rng) -> Shape {
        let l = rng.random_range(1..=5);
        let k = rng.random_range(0..=3);
        let s = rng.random_range(1..=4);
        let n = rng.random_range(20..=200).max(s * 4 * (l + k + 3));
        Shape { n, l, k, s, confounded: false, weights: false }
    }
}

/// Random full-rank study: correlated outcomes with random means, skew and
/// covariate loadings; treatment with both arms in every stratum.
pub fn random_study(rng: &mut impl Rng, sh: Shape) -> StudyData {
    let Shape { n, l, k, s, .. } = sh;
    let labels: Vec<usize> = (0..n).map(|i| i % s).collect();
    let x = normal_matrix(rng, n, k).map(|v| v + 0.3 * v * v);
    let mix = normal_matrix(rng, l, l) + DMatrix::identity(l, l) * 1.5;
    let load = normal_matrix(rng, k, l);
    let shift = normal_matrix(rng, s, l) * 2.0;
    let tau = normal_matrix(rng, 1, l) * 0.5;
    let alpha = normal_matrix(rng, k, 1) * 0.4;
    let probs: Vec<f64> = (0..n)
        .map(|i| {
            if sh.confounded && k > 0 {
                sigmoid((x.row(i) * &alpha)[(0, 0)])
            } else {
                0.3 + 0.4 * (labels[i] as f64 + 0.5) / s as f64
            }
        })
        .collect();
    let z = loop {
        let z = DVector::from_iterator(n, probs.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }));
        let ok = (0..s).all(|j| {
            let cell: Vec<f64> = (0..n).filter(|&i| labels[i] == j).map(|i| z[i]).collect();
            let t = cell.iter().sum::<f64>() as usize;
            t >= l + k + 2 && cell.len() - t >= l + k + 2
        });
        if ok {
            break z;
        }
    };
    let e = normal_matrix(rng, n, l).map(|v| v + 0.2 * (v * v - 1.0)) * mix;
    let mut y = e + &x * &load;
    for i in 0..n {
        for c in 0..l {
            y[(i, c)] += shift[(labels[i], c)] + z[i] * tau[(0, c)];
        }
    }
    let strata = (s > 1).then(|| Strata::from_labels(&labels.iter().map(|j| format!("g{j}")).collect::<Vec<_>>()));
    let w = sh.weights.then(|| {
        DVector::from_iterator(n, (0..n).map(|i| if z[i] == 1.0 { 1.0 / probs[i] } else { 1.0 / (1.0 - probs[i]) }))
    });
    StudyData::new(z, y, (k > 0).then_some(x), strata, w).expect("generated study is valid")
}

/// Relative difference with an absolute floor of one.
pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// The four-row example: z = (1, 1, 0, 0), y = (2, 4, 1, 3).
pub fn four_rows() -> StudyData {
    StudyData::new(
        DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
        DMatrix::from_column_slice(4, 1, &[2.0, 4.0, 1.0, 3.0]),
        None,
        None,
        None,
    )
    .unwrap()
}

/// Two strata, each a copy of the four-row example.
pub fn doubled_four_rows() -> StudyData {
    StudyData::new(
        DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]),
        DMatrix::from_column_slice(8, 1, &[2.0, 4.0, 1.0, 3.0, 2.0, 4.0, 1.0, 3.0]),
        None,
        Some(Strata::from_labels(&["a", "a", "a", "a", "b", "b", "b", "b"])),
        None,
    )
    .unwrap()
}
