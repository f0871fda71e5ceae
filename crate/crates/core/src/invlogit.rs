//! Inverse logistic regression of z on (1, y), or on (G, y) for stratified
//! experiments. The composite gamma' y is a test device: its Wald test and
//! limit law hold under the null of no effect only, so no interval is built.

use nalgebra::{DMatrix, DVector};

use crate::dataset::StudyData;
use crate::error::{Error, Result};
use crate::inference::{self, WaldResult};
use crate::logistic::{fit_logistic, logit};
use crate::numkernel::{
    center, column_means, hcat, partial_out_strata, stratum_counts, stratum_means, symmetrize, weighted_mean_outer,
};
use crate::sre::indicators;
use crate::wchi2::WeightedChiSq;

/// Caveat attached to every inverse-logistic result.
pub const NULL_ONLY: &str = "valid under H0: tau = 0 only";

#[derive(Debug, Clone)]
pub struct LogitFit {
    /// Intercept, or one coefficient per stratum in the stratified variant.
    pub gamma_g: DVector<f64>,
    pub gamma: DVector<f64>,
    pub probs: DVector<f64>,
    /// n^{-1} d'(z - pi) at the optimum.
    pub score: DVector<f64>,
    /// -n^{-1} d' diag(pi (1 - pi)) d.
    pub hessian: DMatrix<f64>,
    /// gamma' tau for the matching effect estimate.
    pub tau_c_logit: f64,
    pub tau: DVector<f64>,
    pub stratified: bool,
    pub converged: bool,
    pub iterations: usize,
    /// Centered (or within-stratum centered) outcomes.
    pub y_tilde: DMatrix<f64>,
    /// Centered (or within-stratum centered) treatment.
    pub z_tilde: DVector<f64>,
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Maximum likelihood fit started at (logit zbar, 0) or (logit zbar_s, 0).
pub fn fit_logit(data: &StudyData, stratified: bool) -> Result<LogitFit> {
    let z = data.z();
    let y = data.y();
    let n = data.n();
    let l = data.l();
    let (design, g_cols, start_g, yt, zt) = if stratified {
        let labels = data.stratum_index();
        let s = data.s();
        let zbar = stratum_means(&col(z), &labels, s);
        let start: Vec<f64> = (0..s).map(|j| logit(zbar[(j, 0)])).collect();
        let g = indicators(&labels, s);
        let yt = partial_out_strata(y, &labels);
        let zt = partial_out_strata(&col(z), &labels).column(0).into_owned();
        (hcat(&[&g, y]), s, start, yt, zt)
    } else {
        let zbar = z.mean();
        let ones = DMatrix::from_element(n, 1, 1.0);
        let yt = center(y, &column_means(y));
        let zt = z.map(|v| v - zbar);
        (hcat(&[&ones, y]), 1, vec![logit(zbar)], yt, zt)
    };
    if start_g.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateTreatment);
    }
    let mut start = DVector::zeros(g_cols + l);
    start.rows_mut(0, g_cols).copy_from_slice(&start_g);
    let lf = fit_logistic(z, &design, start)?;
    let nf = n as f64;
    let score = design.tr_mul(&(z - &lf.probs)) / nf;
    let mut hessian = -weighted_mean_outer(&design, &lf.probs.map(|p| p * (1.0 - p)));
    symmetrize(&mut hessian);
    let gamma_g = lf.coefficients.rows(0, g_cols).into_owned();
    let gamma = lf.coefficients.rows(g_cols, l).into_owned();
    // Difference in means, or the stratum-adjusted coefficient.
    let tau = yt.tr_mul(&zt) / zt.dot(&zt);
    let tau_c_logit = gamma.dot(&tau);
    Ok(LogitFit {
        gamma_g,
        gamma,
        probs: lf.probs,
        score,
        hessian,
        tau_c_logit,
        tau,
        stratified,
        converged: lf.converged,
        iterations: lf.iterations,
        y_tilde: yt,
        z_tilde: zt,
    })
}

/// (A, M) with V_gamma = n^{-1} A^{-1} M A^{-1}.
fn bread_meat(fit: &LogitFit, data: &StudyData) -> (DMatrix<f64>, DMatrix<f64>, f64) {
    let yt = &fit.y_tilde;
    let zt = &fit.z_tilde;
    let mut meat = weighted_mean_outer(yt, &zt.map(|v| v * v));
    symmetrize(&mut meat);
    let (mut bread, phi_z) = if fit.stratified {
        // sum_s pi_s p_s (1 - p_s) S_yy|s.
        let labels = data.stratum_index();
        let s = data.s();
        let sizes = stratum_counts(&labels, s);
        let zbar = stratum_means(&col(data.z()), &labels, s);
        let w = DVector::from_iterator(data.n(), labels.iter().map(|&j| zbar[(j, 0)] * (1.0 - zbar[(j, 0)])));
        let phi_z: f64 = (0..s).map(|j| sizes[j] as f64 / data.n() as f64 * zbar[(j, 0)] * (1.0 - zbar[(j, 0)])).sum();
        (weighted_mean_outer(yt, &w), phi_z)
    } else {
        let zbar = data.z().mean();
        let szz = zbar * (1.0 - zbar);
        (crate::numkernel::mean_outer(yt) * szz, szz)
    };
    symmetrize(&mut bread);
    (bread, meat, phi_z)
}

/// Wald test of gamma = 0 with chi2(L) reference.
pub fn wald_logit(fit: &LogitFit, data: &StudyData) -> Result<WaldResult> {
    let (bread, meat, _) = bread_meat(fit, data);
    inference::wald_sandwich(&fit.gamma, &bread, &meat, data.n(), data.l())
}

/// Sample Gamma whose spectrum is the null law of n * tau_c_logit.
pub fn gamma_matrix_logit(fit: &LogitFit, data: &StudyData) -> Result<DMatrix<f64>> {
    let (bread, meat, phi_z) = bread_meat(fit, data);
    // A = phi_z S_yy in the unstratified case, so A^{-1/2} M A^{-1/2} / phi_z
    // equals S_zz^{-2} S_yy^{-1/2} M S_yy^{-1/2}.
    inference::gamma_matrix(1.0 / phi_z, &bread, &meat)
}

pub fn null_spectrum_logit(fit: &LogitFit, data: &StudyData) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix_logit(fit, data)?)
}
