//! Observational studies: logistic propensity scores, inverse-probability
//! weights, weighted inverse regression of z on (1, y), and inference that
//! accounts for the estimated propensity.
//!
//! The weighted core is parameterized by the design that outcomes are
//! partialled on: a column of ones here, (1, x) for the covariate-adjusted
//! variant in [`crate::covadj`].

use nalgebra::{DMatrix, DVector};

use crate::cre::group_moments_weighted;
use crate::dataset::StudyData;
use crate::design::{rel_diff, rel_diff_scalar, unit_interval_violation, IdentityCheck, TAU_C_FLOOR};
use crate::error::{Error, Result};
use crate::inference::{self, CiSpec, ConfInterval, InferenceInputs, WaldResult};
use crate::logistic::{fit_logistic, logit};
use crate::numkernel::{hcat, solve, solve_vec, symmetrize, weighted_mean_outer, with_intercept, wls, wls_multi};
use crate::wchi2::WeightedChiSq;

/// Estimated propensities closer than this to 0 or 1 trigger a warning.
pub const OVERLAP_WARN: f64 = 1e-4;
/// Tolerance on the max-norm of the mean score at the propensity optimum.
pub const SCORE_CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// Fit a logistic propensity on (1, x).
    Estimate,
    /// Use the weights column as known inverse-probability weights.
    User,
}

impl std::str::FromStr for WeightSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimate" => Ok(WeightSource::Estimate),
            "user" => Ok(WeightSource::User),
            other => Err(Error::InvalidSpec(format!("unknown weight source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropensityFit {
    /// Logistic coefficients, intercept first.
    pub alpha: DVector<f64>,
    pub scores: DVector<f64>,
    pub weights: DVector<f64>,
    /// Rows S(z_i, x_i; alpha_hat) = (z_i - e_i)(1, x_i).
    pub score_contribs: DMatrix<f64>,
    /// n^{-1} sum e_i (1 - e_i) xo_i xo_i'.
    pub info: DMatrix<f64>,
    /// Rows of the weight gradient with respect to alpha.
    pub grad_w: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityFit {
    /// Columns I^{-1} S_i, one per unit.
    pub fn influence(&self) -> Result<DMatrix<f64>> {
        solve(&self.info, &self.score_contribs.transpose())
    }
}

#[derive(Debug, Clone)]
pub enum Propensity {
    Estimated(PropensityFit),
    /// User-supplied weights treated as known.
    User,
}

impl Propensity {
    pub fn estimated(&self) -> Option<&PropensityFit> {
        match self {
            Propensity::Estimated(p) => Some(p),
            Propensity::User => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObsFit {
    pub beta_os: DVector<f64>,
    /// Weighted (Hajek) effects.
    pub tau_os: DVector<f64>,
    pub tau_c_os: f64,
    pub phi_yy: DMatrix<f64>,
    pub phi_zz: f64,
    pub phi_yz: DVector<f64>,
    /// Only defined without covariate partialling.
    pub sigma_os_hat: Option<DMatrix<f64>>,
    /// Residuals of the weighted inverse regression.
    pub residuals: DVector<f64>,
    /// Outcomes minus their weighted projection on the partialling design.
    pub y_check: DMatrix<f64>,
    /// Treatment residualized on the partial design, weighted.
    pub z_check: DVector<f64>,
    pub weights: DVector<f64>,
    pub propensity: Propensity,
    pub warnings: Vec<String>,
    pub checks: Vec<IdentityCheck>,
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Logistic propensity on (1, x), started at (logit zbar, 0, ..., 0).
pub fn fit_propensity(data: &StudyData) -> Result<PropensityFit> {
    let x = data.x().ok_or_else(|| Error::InvalidSpec("propensity estimation needs covariates".into()))?;
    let z = data.z();
    let xo = with_intercept(x);
    let mut start = DVector::zeros(xo.ncols());
    start[0] = logit(z.mean());
    let lf = fit_logistic(z, &xo, start)?;
    let n = data.n();
    let e = &lf.probs;
    let mut score_contribs = xo.clone();
    let mut grad_w = xo.clone();
    for i in 0..n {
        let d = e[i] * (1.0 - e[i]);
        score_contribs.row_mut(i).scale_mut(z[i] - e[i]);
        let dw = -z[i] / (e[i] * e[i]) + (1.0 - z[i]) / ((1.0 - e[i]) * (1.0 - e[i]));
        grad_w.row_mut(i).scale_mut(dw * d);
    }
    let mut info = weighted_mean_outer(&xo, &e.map(|p| p * (1.0 - p)));
    symmetrize(&mut info);
    let weights = DVector::from_iterator(n, (0..n).map(|i| z[i] / e[i] + (1.0 - z[i]) / (1.0 - e[i])));
    Ok(PropensityFit {
        alpha: lf.coefficients,
        scores: lf.probs.clone(),
        weights,
        score_contribs,
        info,
        grad_w,
        converged: lf.converged,
        iterations: lf.iterations,
    })
}

fn resolve_weights(data: &StudyData, source: WeightSource) -> Result<(DVector<f64>, Propensity, Vec<String>)> {
    let mut warnings = Vec::new();
    match source {
        WeightSource::Estimate => {
            let p = fit_propensity(data)?;
            let extreme = p.scores.iter().filter(|&&e| !(OVERLAP_WARN..=1.0 - OVERLAP_WARN).contains(&e)).count();
            if extreme > 0 {
                warnings.push(format!(
                    "{extreme} estimated propensities lie within {OVERLAP_WARN} of 0 or 1; overlap is doubtful"
                ));
            }
            let mean_score = p.score_contribs.row_sum() / data.n() as f64;
            if mean_score.amax() > SCORE_CHECK_TOL {
                warnings.push(format!("propensity score equation residual {:.3e}", mean_score.amax()));
            }
            Ok((p.weights.clone(), Propensity::Estimated(p), warnings))
        }
        WeightSource::User => {
            let w = data
                .user_weights()
                .ok_or_else(|| Error::InvalidSpec("user weights requested but no weights column".into()))?
                .clone();
            warnings.push("propensity treated as known".into());
            Ok((w, Propensity::User, warnings))
        }
    }
}

/// Weighted fit with outcomes and treatment partialled on `partial` (which
/// carries its own intercept column).
pub(crate) fn fit_partialled(data: &StudyData, source: WeightSource, partial: &DMatrix<f64>) -> Result<ObsFit> {
    let (w, propensity, warnings) = resolve_weights(data, source)?;
    let z = data.z();
    let y = data.y();
    let n = data.n() as f64;
    let l = data.l();
    let p = partial.ncols();

    let y_check = wls_multi(y, partial, &w, false)?.residuals;
    let z_check = wls(z, partial, &w, false)?.residuals;
    let mut phi_yy = weighted_mean_outer(&y_check, &w);
    symmetrize(&mut phi_yy);
    let wz = z_check.component_mul(&w);
    let phi_zz = wz.dot(&z_check) / n;
    let phi_yz = y_check.tr_mul(&wz) / n;

    let inv = wls(z, &hcat(&[partial, y]), &w, false)?;
    let beta_os = inv.coefficients.rows(p, l).into_owned();
    let fwd = wls_multi(y, &hcat(&[partial, &col(z)]), &w, false)?;
    let tau_os = fwd.coefficients.row(p).transpose();
    let tau_c_os = beta_os.dot(&tau_os);

    let mut checks = Vec::new();
    let prop_a = solve_vec(&phi_yy, &tau_os)? * phi_zz;
    checks.push(IdentityCheck::value("beta = phi_zz phi_yy^-1 tau", rel_diff(&beta_os, &prop_a, 0.0)));
    let two_step = wls(&(y * &beta_os), &hcat(&[partial, &col(z)]), &w, false)?;
    checks.push(IdentityCheck::value(
        "two-step composite regression",
        rel_diff_scalar(two_step.coefficients[p], tau_c_os, TAU_C_FLOOR),
    ));

    let sigma_os_hat = if p == 1 {
        let (m1, cov1) = group_moments_weighted(y, &w, |i| z[i] == 1.0);
        let (m0, cov0) = group_moments_weighted(y, &w, |i| z[i] == 0.0);
        checks.push(IdentityCheck::value(
            "tau equals the weighted group-mean difference",
            rel_diff(&tau_os, &(&m1 - &m0), 0.0),
        ));
        let sw = w.sum() / n;
        let swz = w.dot(z) / n;
        let phi_zz_alt = swz / sw * (sw - swz);
        checks.push(IdentityCheck::value("phi_zz = S_wz S_w^-1 S_w(1-z)", rel_diff_scalar(phi_zz, phi_zz_alt, 0.0)));
        let sigma = (&cov1 + &cov0) / phi_zz;
        match solve_vec(&sigma, &tau_os) {
            Ok(st) => {
                let q = tau_os.dot(&st);
                checks.push(IdentityCheck::value(
                    "beta = Sigma^-1 tau / (1 + tau' Sigma^-1 tau)",
                    rel_diff(&beta_os, &(st / (1.0 + q)), 0.0),
                ));
                checks.push(IdentityCheck::value(
                    "tau_c = q / (1 + q)",
                    rel_diff_scalar(tau_c_os, q / (1.0 + q), TAU_C_FLOOR),
                ));
            }
            Err(_) => checks
                .push(IdentityCheck::skipped("beta = Sigma^-1 tau / (1 + tau' Sigma^-1 tau)", "Sigma-hat is singular")),
        }
        Some(sigma)
    } else {
        None
    };
    checks.push(IdentityCheck::value("tau_c in [0, 1)", unit_interval_violation(tau_c_os)));

    Ok(ObsFit {
        beta_os,
        tau_os,
        tau_c_os,
        phi_yy,
        phi_zz,
        phi_yz,
        sigma_os_hat,
        residuals: inv.residuals,
        y_check,
        z_check,
        weights: w,
        propensity,
        warnings,
        checks,
    })
}

/// Weighted inverse regression of z on (1, y).
pub fn fit(data: &StudyData, source: WeightSource) -> Result<ObsFit> {
    fit_partialled(data, source, &DMatrix::from_element(data.n(), 1, 1.0))
}

/// Rows psi_i: the weighted score of the inverse regression plus the
/// propensity-estimation correction (absent for known weights).
pub fn psi_terms(fit: &ObsFit) -> Result<DMatrix<f64>> {
    let n = fit.y_check.nrows();
    let mut psi = fit.y_check.clone();
    for i in 0..n {
        psi.row_mut(i).scale_mut(fit.residuals[i] * fit.weights[i]);
    }
    if let Some(p) = fit.propensity.estimated() {
        let mut sy = fit.y_check.clone();
        for i in 0..n {
            sy.row_mut(i).scale_mut(fit.residuals[i]);
        }
        let c = sy.tr_mul(&p.grad_w) / n as f64;
        psi += (c * p.influence()?).transpose();
    }
    Ok(psi)
}

fn psi_meat(fit: &ObsFit) -> Result<DMatrix<f64>> {
    let psi = psi_terms(fit)?;
    let mut m = psi.tr_mul(&psi) / psi.nrows() as f64;
    symmetrize(&mut m);
    Ok(m)
}

/// Wald test of beta_os = 0 with covariance n^{-1} phi_yy^{-1} M phi_yy^{-1}.
pub fn wald_test_os(fit: &ObsFit) -> Result<WaldResult> {
    let m = psi_meat(fit)?;
    inference::wald_sandwich(&fit.beta_os, &fit.phi_yy, &m, fit.y_check.nrows(), fit.beta_os.len())
}

/// Variance of sqrt(n)(tau_c_hat - tau_c) in the tau != 0 regime:
/// phi_zz^{-2} n^{-1} sum (beta' r_i)^2, where the treatment-variance term
/// is -[(w_i zc_i^2 - phi_zz) + g_z' infl_i] beta' phi_yy beta / phi_zz.
pub fn variance_normal_os(fit: &ObsFit) -> Result<f64> {
    let n = fit.y_check.nrows();
    let nf = n as f64;
    let beta = &fit.beta_os;
    let by = &fit.y_check * beta;
    let bpb = beta.dot(&(&fit.phi_yy * beta));
    let psi_b = psi_terms(fit)? * beta;
    let zz = fit.z_check.map(|v| v * v);
    let (b, g) = match fit.propensity.estimated() {
        Some(p) => {
            let infl = p.influence()?;
            let d = p.grad_w.tr_mul(&by.map(|v| v * v)) / nf;
            let gz = p.grad_w.tr_mul(&zz) / nf;
            (infl.tr_mul(&d), infl.tr_mul(&gz))
        }
        None => (DVector::zeros(n), DVector::zeros(n)),
    };
    let mean_sq = (0..n)
        .map(|i| {
            let a = fit.weights[i] * by[i] * by[i] - bpb;
            let c = -((fit.weights[i] * zz[i] - fit.phi_zz) + g[i]) / fit.phi_zz * bpb;
            let r = a + b[i] + c + 2.0 * psi_b[i];
            r * r
        })
        .sum::<f64>()
        / nf;
    Ok(mean_sq / (fit.phi_zz * fit.phi_zz))
}

/// phi_zz^{-1} phi_yy^{-1/2} (n^{-1} sum psi psi') phi_yy^{-1/2}.
pub fn gamma_matrix_os(fit: &ObsFit) -> Result<DMatrix<f64>> {
    inference::gamma_matrix(1.0 / fit.phi_zz, &fit.phi_yy, &psi_meat(fit)?)
}

/// Null law of n * tau_c_hat.
pub fn gamma_null_os(fit: &ObsFit) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix_os(fit)?)
}

pub fn confidence_interval_os(fit: &ObsFit, spec: &CiSpec) -> Result<ConfInterval> {
    let wald = wald_test_os(fit)?;
    let law = gamma_null_os(fit)?;
    let inp = InferenceInputs {
        tau_c: fit.tau_c_os,
        v: variance_normal_os(fit)?,
        null_law: Some(&law),
        n: fit.y_check.nrows(),
        wald_p: wald.p_value,
    };
    inference::confidence_interval(&inp, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::worst_residual;

    fn toy() -> StudyData {
        StudyData::new(
            DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(4, 1, &[2.0, 4.0, 1.0, 3.0]),
            None,
            None,
            Some(DVector::from_element(4, 2.0)),
        )
        .unwrap()
    }

    #[test]
    fn constant_weights_hand_values() {
        let f = fit(&toy(), WeightSource::User).unwrap();
        assert!((f.tau_os[0] - 1.0).abs() < 1e-12);
        assert!((f.beta_os[0] - 0.2).abs() < 1e-12);
        assert!((f.tau_c_os - 0.2).abs() < 1e-12);
        assert!((f.phi_zz - 0.5).abs() < 1e-12);
        assert!((f.phi_yy[(0, 0)] - 2.5).abs() < 1e-12);
        assert!(worst_residual(&f.checks) < 1e-12);
        assert_eq!(f.warnings, vec!["propensity treated as known".to_string()]);
    }

    #[test]
    fn estimate_without_covariates_is_rejected() {
        assert!(matches!(fit(&toy(), WeightSource::Estimate), Err(Error::InvalidSpec(_))));
    }
}
