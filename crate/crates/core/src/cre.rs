//! Completely randomized experiments: inverse OLS of z on (1, y), composite
//! effect, robust Wald test, normal-regime variance and the null spectrum.

use nalgebra::{DMatrix, DVector};

use crate::dataset::StudyData;
use crate::design::{rel_diff, rel_diff_scalar, unit_interval_violation, Design, IdentityCheck, TAU_C_FLOOR};
use crate::error::{Error, Result};
use crate::inference::{self, CiSpec, ConfInterval, InferenceInputs, WaldResult};
use crate::numkernel::{center, mean_outer, ols, solve_vec, weighted_mean_outer, MomentSet};
use crate::wchi2::WeightedChiSq;

#[derive(Debug, Clone)]
pub struct CompositeFit {
    pub beta0: f64,
    /// Inverse-regression weights.
    pub beta: DVector<f64>,
    /// Difference in means per outcome.
    pub tau: DVector<f64>,
    pub tau_c: f64,
    /// (1 - zbar)^{-1} cov1 + zbar^{-1} cov0.
    pub sigma_hat: DMatrix<f64>,
    /// Residuals of the inverse regression.
    pub residuals: DVector<f64>,
    pub moments: MomentSet,
    pub design: Design,
    pub checks: Vec<IdentityCheck>,
}

/// Group mean and 1/n_g covariance of the rows where `mask` holds.
pub(crate) fn group_moments(y: &DMatrix<f64>, mask: impl Fn(usize) -> bool) -> (DVector<f64>, DMatrix<f64>) {
    let rows: Vec<usize> = (0..y.nrows()).filter(|&i| mask(i)).collect();
    let sub = y.select_rows(&rows);
    let mean = crate::numkernel::column_means(&sub);
    let c = center(&sub, &mean);
    (mean, mean_outer(&c))
}

/// Weighted group mean and n^{-1} sum over the group of w (y - m)(y - m)',
/// where n is the full sample size.
pub(crate) fn group_moments_weighted(
    y: &DMatrix<f64>,
    w: &DVector<f64>,
    mask: impl Fn(usize) -> bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = y.nrows();
    let mut gw = DVector::zeros(n);
    for i in (0..n).filter(|&i| mask(i)) {
        gw[i] = w[i];
    }
    let mean = y.tr_mul(&gw) / gw.sum();
    let c = center(y, &mean);
    (mean, weighted_mean_outer(&c, &gw))
}

/// Fit the composite on all units, ignoring strata and covariates.
pub fn fit(data: &StudyData) -> Result<CompositeFit> {
    let z = data.z();
    let y = data.y();
    let moments = MomentSet::unweighted(z, y);
    let zbar = moments.z_mean;
    if !(zbar > 0.0 && zbar < 1.0) {
        return Err(Error::DegenerateTreatment);
    }
    let inv = ols(z, y, true)?;
    let beta0 = inv.coefficients[0];
    let beta = inv.coefficients.rows(1, data.l()).into_owned();

    let (m1, cov1) = group_moments(y, |i| z[i] == 1.0);
    let (m0, cov0) = group_moments(y, |i| z[i] == 0.0);
    let tau = &m1 - &m0;
    let tau_c = beta.dot(&tau);
    let sigma_hat = &cov1 / (1.0 - zbar) + &cov0 / zbar;

    let mut checks = Vec::new();
    let prop_a = solve_vec(&moments.s_yy, &tau)? * (zbar * (1.0 - zbar));
    checks.push(IdentityCheck::value("beta = zbar(1-zbar) S_yy^-1 tau", rel_diff(&beta, &prop_a, 0.0)));
    match solve_vec(&sigma_hat, &tau) {
        Ok(st) => {
            let q = tau.dot(&st);
            checks.push(IdentityCheck::value(
                "beta = Sigma^-1 tau / (1 + tau' Sigma^-1 tau)",
                rel_diff(&beta, &(st / (1.0 + q)), 0.0),
            ));
            checks
                .push(IdentityCheck::value("tau_c = q / (1 + q)", rel_diff_scalar(tau_c, q / (1.0 + q), TAU_C_FLOOR)));
        }
        Err(_) => checks
            .push(IdentityCheck::skipped("beta = Sigma^-1 tau / (1 + tau' Sigma^-1 tau)", "Sigma-hat is singular")),
    }
    let yc = y * &beta;
    let two_step = ols(&yc, &DMatrix::from_column_slice(data.n(), 1, z.as_slice()), true)?;
    checks.push(IdentityCheck::value(
        "two-step composite regression",
        rel_diff_scalar(two_step.coefficients[1], tau_c, TAU_C_FLOOR),
    ));
    checks.push(IdentityCheck::value("tau_c in [0, 1)", unit_interval_violation(tau_c)));
    Ok(CompositeFit {
        beta0,
        beta,
        tau,
        tau_c,
        sigma_hat,
        residuals: inv.residuals,
        moments,
        design: Design::Cre,
        checks,
    })
}

fn centered_y(fit: &CompositeFit, data: &StudyData) -> DMatrix<f64> {
    center(data.y(), &fit.moments.y_mean)
}

/// HC0 Wald test of beta = 0 with chi2(L) reference.
pub fn wald_test(fit: &CompositeFit, data: &StudyData) -> Result<WaldResult> {
    let yt = centered_y(fit, data);
    let meat = weighted_mean_outer(&yt, &fit.residuals.map(|e| e * e));
    inference::wald_sandwich(&fit.beta, &fit.moments.s_yy, &meat, data.n(), data.l())
}

/// Sample variance of sqrt(n) (tau_c_hat - tau_c) in the tau != 0 regime.
pub fn variance_normal(fit: &CompositeFit, data: &StudyData) -> f64 {
    let yt = centered_y(fit, data);
    let s_zz = fit.moments.s_zz;
    let zbar = fit.moments.z_mean;
    let bsb = fit.beta.dot(&(&fit.moments.s_yy * &fit.beta));
    let by = &yt * &fit.beta;
    let z = data.z();
    let mean_sq: f64 = (0..data.n())
        .map(|i| {
            let dz = (z[i] - zbar).powi(2) - s_zz;
            let br = by[i] * by[i] - bsb - dz / s_zz * bsb + 2.0 * fit.residuals[i] * by[i];
            br * br
        })
        .sum::<f64>()
        / data.n() as f64;
    mean_sq / (s_zz * s_zz)
}

/// S_zz^{-1} S_yy^{-1/2} (n^{-1} sum e_i^2 yt_i yt_i') S_yy^{-1/2}.
pub fn gamma_matrix(fit: &CompositeFit, data: &StudyData) -> Result<DMatrix<f64>> {
    let yt = centered_y(fit, data);
    let meat = weighted_mean_outer(&yt, &fit.residuals.map(|e| e * e));
    inference::gamma_matrix(1.0 / fit.moments.s_zz, &fit.moments.s_yy, &meat)
}

/// Null law of n * tau_c_hat.
pub fn gamma_null(fit: &CompositeFit, data: &StudyData) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix(fit, data)?)
}

pub fn confidence_interval(fit: &CompositeFit, data: &StudyData, spec: &CiSpec) -> Result<ConfInterval> {
    let wald = wald_test(fit, data)?;
    let law = gamma_null(fit, data)?;
    let inp = InferenceInputs {
        tau_c: fit.tau_c,
        v: variance_normal(fit, data),
        null_law: Some(&law),
        n: data.n(),
        wald_p: wald.p_value,
    };
    inference::confidence_interval(&inp, spec)
}
