//! Covariate-adjusted composites: z on (1, x, y) for completely randomized
//! experiments, z on (G, x, y) with an r-weighted covariate correction for
//! stratified experiments, and weighted z on (1, x, y) for observational data.

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::StudyData;
use crate::design::{rel_diff, rel_diff_scalar, unit_interval_violation, IdentityCheck, TAU_C_FLOOR};
use crate::error::{Error, Result};
use crate::inference::{self, chi2_upper, CiSpec, ConfInterval, InferenceInputs, IntervalKind, WaldResult};
use crate::numkernel::{
    center, column_means, hcat, lstsq, mean_outer, ols, partial_out_strata, solve_vec, stratum_counts, stratum_means,
    symmetrize, weighted_mean_outer, with_intercept,
};
use crate::obs::{self, ObsFit, WeightSource};
use crate::wchi2::WeightedChiSq;

/// Resamples used for the r_opt bootstrap.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
/// Default bootstrap seed.
pub const BOOTSTRAP_SEED: u64 = 0xb007_5eed;
/// Covariate-composite variance at or below this leaves r_opt undefined.
pub const ZERO_VARIANCE_X: f64 = 1e-14;

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

// ---------------------------------------------------------------------------
// Completely randomized experiments.

#[derive(Debug, Clone)]
pub struct CreAdjustedFit {
    pub beta0: f64,
    pub beta_x: DVector<f64>,
    pub beta_a: DVector<f64>,
    /// ANCOVA effects: z coefficients of y on (1, x, z).
    pub tau_a: DVector<f64>,
    pub tau_c_a: f64,
    pub residuals: DVector<f64>,
    /// S_yy - S_yx S_xx^{-1} S_xy.
    pub phi_yy_x: DMatrix<f64>,
    /// zbar (1 - zbar).
    pub s_zz: f64,
    /// n^{-1} z'(I - H_x) z.
    pub phi_zz_x: f64,
    pub y_centered: DMatrix<f64>,
    /// Residuals of y on (1, x).
    pub y_check: DMatrix<f64>,
    pub checks: Vec<IdentityCheck>,
}

pub fn fit_cre_adjusted(data: &StudyData) -> Result<CreAdjustedFit> {
    let z = data.z();
    let y = data.y();
    let x = data.x_or_empty();
    let n = data.n() as f64;
    let k = data.k();
    let l = data.l();
    let zbar = z.mean();
    if !(zbar > 0.0 && zbar < 1.0) {
        return Err(Error::DegenerateTreatment);
    }
    let xo = with_intercept(&x);

    let inv = ols(z, &hcat(&[&x, y]), true)?;
    let beta0 = inv.coefficients[0];
    let beta_x = inv.coefficients.rows(1, k).into_owned();
    let beta_a = inv.coefficients.rows(1 + k, l).into_owned();
    let xz = hcat(&[&xo, &col(z)]);
    let fwd = lstsq(&xz, y)?;
    let tau_a = fwd.coefficients.row(k + 1).transpose();
    let tau_c_a = beta_a.dot(&tau_a);

    let y_check = lstsq(&xo, y)?.residuals;
    let z_check = lstsq(&xo, &col(z))?.residuals.column(0).into_owned();
    let phi_zz_x = z_check.dot(&z_check) / n;
    let mut phi_yy_x = mean_outer(&y_check);
    symmetrize(&mut phi_yy_x);

    let mut checks = Vec::new();
    let prop = solve_vec(&phi_yy_x, &tau_a)? * phi_zz_x;
    checks.push(IdentityCheck::value("beta_a = phi_zz,x phi_yy,x^-1 tau_a", rel_diff(&beta_a, &prop, 0.0)));
    let two_step = lstsq(&xz, &col(&(y * &beta_a)))?.coefficients[(k + 1, 0)];
    checks.push(IdentityCheck::value("two-step composite regression", rel_diff_scalar(two_step, tau_c_a, TAU_C_FLOOR)));
    checks.push(IdentityCheck::value("tau_c in [0, 1)", unit_interval_violation(tau_c_a)));

    Ok(CreAdjustedFit {
        beta0,
        beta_x,
        beta_a,
        tau_a,
        tau_c_a,
        residuals: inv.residuals,
        phi_yy_x,
        s_zz: zbar * (1.0 - zbar),
        phi_zz_x,
        y_centered: center(y, &column_means(y)),
        y_check,
        checks,
    })
}

fn cre_adjusted_meat(fit: &CreAdjustedFit) -> DMatrix<f64> {
    let mut m = weighted_mean_outer(&fit.y_check, &fit.residuals.map(|e| e * e));
    symmetrize(&mut m);
    m
}

/// Robust Wald test of beta_a = 0 with chi2(L) reference.
pub fn wald_cre_adjusted(fit: &CreAdjustedFit) -> Result<WaldResult> {
    let n = fit.y_check.nrows();
    inference::wald_sandwich(&fit.beta_a, &fit.phi_yy_x, &cre_adjusted_meat(fit), n, fit.beta_a.len())
}

/// Normal-regime variance S_zz^{-2} n^{-1} sum (beta' r_i)^2.
pub fn variance_cre_adjusted(fit: &CreAdjustedFit, data: &StudyData) -> f64 {
    let b = &fit.beta_a;
    let byc = &fit.y_centered * b;
    let byk = &fit.y_check * b;
    let bpb = b.dot(&(&fit.phi_yy_x * b));
    let z = data.z();
    let zbar = z.mean();
    let n = data.n();
    let mean_sq = (0..n)
        .map(|i| {
            let dz = (z[i] - zbar).powi(2) - fit.s_zz;
            // (b'yc)^2 - b'S_yy b - b'B(xc yc' - S_xy) b collapses to (b'yc)(b'ycheck) - b'Phi b.
            let br = byc[i] * byk[i] - bpb - dz / fit.s_zz * bpb + 2.0 * fit.residuals[i] * byk[i];
            br * br
        })
        .sum::<f64>()
        / n as f64;
    mean_sq / (fit.s_zz * fit.s_zz)
}

/// S_zz^{-1} Phi^{-1/2} V_ye Phi^{-1/2}.
pub fn gamma_matrix_cre_adjusted(fit: &CreAdjustedFit) -> Result<DMatrix<f64>> {
    inference::gamma_matrix(1.0 / fit.s_zz, &fit.phi_yy_x, &cre_adjusted_meat(fit))
}

pub fn gamma_cre_adjusted(fit: &CreAdjustedFit) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix_cre_adjusted(fit)?)
}

pub fn confidence_interval_cre_adjusted(fit: &CreAdjustedFit, data: &StudyData, spec: &CiSpec) -> Result<ConfInterval> {
    let wald = wald_cre_adjusted(fit)?;
    let law = gamma_cre_adjusted(fit)?;
    let inp = InferenceInputs {
        tau_c: fit.tau_c_a,
        v: variance_cre_adjusted(fit, data),
        null_law: Some(&law),
        n: data.n(),
        wald_p: wald.p_value,
    };
    inference::confidence_interval(&inp, spec)
}

// ---------------------------------------------------------------------------
// Stratified experiments.

/// Weight on the covariate composite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RChoice {
    Fixed(f64),
    /// Plug-in variance-minimizing r.
    Opt,
}

impl std::str::FromStr for RChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "opt" {
            return Ok(RChoice::Opt);
        }
        s.parse::<f64>()
            .ok()
            .filter(|r| r.is_finite())
            .map(RChoice::Fixed)
            .ok_or_else(|| Error::InvalidSpec(format!("r must be a finite number or `opt`, got `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct SreAdjustedFit {
    /// Coefficients of u = (x, y) in z on (G, x, y).
    pub beta_u: DVector<f64>,
    /// Stratum-adjusted effects on u.
    pub tau_u: DVector<f64>,
    pub k: usize,
    pub tau_c_y: f64,
    pub tau_c_x: f64,
    pub r_used: f64,
    pub r_opt_hat: Option<f64>,
    /// tau_c_y - r tau_c_x.
    pub tau_c: f64,
    pub phi_z: f64,
    pub phi_u: DMatrix<f64>,
    pub u_tilde: DMatrix<f64>,
    pub z_tilde: DVector<f64>,
    pub residuals: DVector<f64>,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub treated_share: Vec<f64>,
    pub checks: Vec<IdentityCheck>,
}

impl SreAdjustedFit {
    pub fn beta_x(&self) -> DVector<f64> {
        self.beta_u.rows(0, self.k).into_owned()
    }

    pub fn beta_y(&self) -> DVector<f64> {
        let l = self.beta_u.len() - self.k;
        self.beta_u.rows(self.k, l).into_owned()
    }

    fn d_diag(&self, r: f64) -> DVector<f64> {
        DVector::from_iterator(self.beta_u.len(), (0..self.beta_u.len()).map(|j| if j < self.k { -r } else { 1.0 }))
    }
}

pub fn fit_sre_adjusted(data: &StudyData, r: RChoice) -> Result<SreAdjustedFit> {
    let labels = data.stratum_index();
    let s = data.s();
    let n = data.n() as f64;
    let k = data.k();
    let l = data.l();
    let u = hcat(&[&data.x_or_empty(), data.y()]);
    let ut = partial_out_strata(&u, &labels);
    let zt_m = partial_out_strata(&col(data.z()), &labels);
    let zt = zt_m.column(0).into_owned();

    let inv = ols(&zt, &ut, false)?;
    let beta_u = inv.coefficients;
    let tau_u = lstsq(&zt_m, &ut)?.coefficients.row(0).transpose();
    let phi_z = zt.dot(&zt) / n;
    let mut phi_u = mean_outer(&ut);
    symmetrize(&mut phi_u);
    let bx = beta_u.rows(0, k).into_owned();
    let by = beta_u.rows(k, l).into_owned();
    let tau_c_x = bx.dot(&tau_u.rows(0, k));
    let tau_c_y = by.dot(&tau_u.rows(k, l));
    let sizes = stratum_counts(&labels, s);
    let zbar_s = stratum_means(&col(data.z()), &labels, s);
    let treated_share: Vec<f64> = (0..s).map(|j| zbar_s[(j, 0)]).collect();

    let mut checks = Vec::new();
    let prop = solve_vec(&phi_u, &tau_u)? * phi_z;
    checks.push(IdentityCheck::value("beta_u = phi_z phi_u^-1 tau_u", rel_diff(&beta_u, &prop, 0.0)));
    let step2 = lstsq(&zt_m, &partial_out_strata(&col(&(data.y() * &by)), &labels))?.coefficients[(0, 0)];
    checks.push(IdentityCheck::value("step-two composite regression", rel_diff_scalar(step2, tau_c_y, TAU_C_FLOOR)));
    if k > 0 {
        let xc = data.x_or_empty() * &bx;
        let step3 = lstsq(&zt_m, &partial_out_strata(&col(&xc), &labels))?.coefficients[(0, 0)];
        checks.push(IdentityCheck::value(
            "step-three covariate regression",
            rel_diff_scalar(step3, tau_c_x, TAU_C_FLOOR),
        ));
    }

    let mut fit = SreAdjustedFit {
        beta_u,
        tau_u,
        k,
        tau_c_y,
        tau_c_x,
        r_used: 0.0,
        r_opt_hat: None,
        tau_c: tau_c_y,
        phi_z,
        phi_u,
        u_tilde: ut,
        z_tilde: zt,
        residuals: inv.residuals,
        labels,
        sizes,
        treated_share,
        checks,
    };
    let r_used = match r {
        RChoice::Fixed(v) => v,
        RChoice::Opt => {
            let ro = r_opt_hat(&fit, data)?;
            fit.r_opt_hat = Some(ro);
            ro
        }
    };
    fit.r_used = r_used;
    fit.tau_c = tau_c_y - r_used * tau_c_x;
    // Only the full composite (r = -1) is a squared correlation.
    fit.checks.push(IdentityCheck::value("beta_u' tau_u in [0, 1)", unit_interval_violation(tau_c_y + tau_c_x)));
    Ok(fit)
}

/// Per-unit beta' r_i(r) for the normal-regime variance.
fn sre_adjusted_influence(fit: &SreAdjustedFit, data: &StudyData, r: f64) -> Result<DVector<f64>> {
    let n = data.n();
    let b = &fit.beta_u;
    let d = fit.d_diag(r);
    let db = b.component_mul(&d);
    let ub = &fit.u_tilde * b;
    let udb = &fit.u_tilde * &db;
    let s = fit.sizes.len();
    // b' D S_uu|s b per stratum.
    let mut bdsb = vec![0.0; s];
    for i in 0..n {
        bdsb[fit.labels[i]] += udb[i] * ub[i];
    }
    for j in 0..s {
        bdsb[j] /= fit.sizes[j] as f64;
    }
    let phi_b = &fit.phi_u * b;
    let bdpb = db.dot(&phi_b);
    // b' Phi D Phi^{-1} = (Phi^{-1} D Phi b)'.
    let cross = solve_vec(&fit.phi_u, &phi_b.component_mul(&d))?;
    let uc = &fit.u_tilde * &cross;
    let z = data.z();
    Ok(DVector::from_iterator(
        n,
        (0..n).map(|i| {
            let st = fit.labels[i];
            let p = fit.treated_share[st];
            let dz = (z[i] - p).powi(2) - p * (1.0 - p);
            udb[i] * ub[i] - bdsb[st] - dz / fit.phi_z * bdpb + fit.residuals[i] * (uc[i] + udb[i])
        }),
    ))
}

/// Normal-regime variance of sqrt(n)(tau_c(r) - tau_c) at a fixed r.
pub fn variance_sre_adjusted(fit: &SreAdjustedFit, data: &StudyData, r: f64) -> Result<f64> {
    let br = sre_adjusted_influence(fit, data, r)?;
    Ok(br.dot(&br) / br.len() as f64 / (fit.phi_z * fit.phi_z))
}

/// (V(-1) - V(1)) / (4 V_x) with V_x = V(-1)/2 + V(1)/2 - V(0).
pub fn r_opt_hat(fit: &SreAdjustedFit, data: &StudyData) -> Result<f64> {
    let vm = variance_sre_adjusted(fit, data, -1.0)?;
    let v0 = variance_sre_adjusted(fit, data, 0.0)?;
    let vp = variance_sre_adjusted(fit, data, 1.0)?;
    let vx = 0.5 * vm + 0.5 * vp - v0;
    if !(vx > ZERO_VARIANCE_X) {
        return Err(Error::ZeroVarianceX);
    }
    Ok((vm - vp) / (4.0 * vx))
}

/// Gamma for a fixed r <= 0, with D^{1/2} = diag(sqrt(-r) I_K, I_L).
pub fn gamma_matrix_sre_adjusted(fit: &SreAdjustedFit, r: f64) -> Result<DMatrix<f64>> {
    if r > 0.0 {
        return Err(Error::InvalidSpec(format!("D^(1/2) has no real square root for r = {r} > 0; use the bootstrap")));
    }
    let dh = fit.d_diag(r).map(|v| v.sqrt());
    let meat = weighted_mean_outer(&fit.u_tilde, &fit.residuals.map(|e| e * e));
    let scaled = DMatrix::from_diagonal(&dh) * meat * DMatrix::from_diagonal(&dh);
    inference::gamma_matrix(1.0 / fit.phi_z, &fit.phi_u, &scaled)
}

pub fn gamma_sre_adjusted(fit: &SreAdjustedFit, r: f64) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix_sre_adjusted(fit, r)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SreAdjustedWald {
    /// Statistic on the full (K + L) coefficient vector, referred to chi2(L).
    pub wald: WaldResult,
    pub full_df: usize,
    /// p-value of the same statistic under chi2(K + L).
    pub p_value_full_df: f64,
}

/// Robust Wald statistic on beta_u with the chi2(L) reference and the
/// chi2(K + L) alternative reported side by side.
pub fn wald_sre_adjusted(fit: &SreAdjustedFit, data: &StudyData) -> Result<SreAdjustedWald> {
    let meat = weighted_mean_outer(&fit.u_tilde, &fit.residuals.map(|e| e * e));
    let wald = inference::wald_sandwich(&fit.beta_u, &fit.phi_u, &meat, data.n(), data.l())?;
    let full_df = fit.beta_u.len();
    Ok(SreAdjustedWald { wald, full_df, p_value_full_df: chi2_upper(wald.statistic, full_df) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapSummary {
    pub resamples: usize,
    pub failures: usize,
    pub seed: u64,
    pub mean: f64,
    pub std_error: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Bootstrap of tau_c(r), resampling with replacement inside each
/// stratum-by-arm cell so stratum sizes and arm counts stay fixed. Under
/// `RChoice::Opt` each resample re-estimates r_opt.
pub fn bootstrap_sre_adjusted(
    data: &StudyData,
    r: RChoice,
    resamples: usize,
    seed: u64,
    alpha: f64,
) -> Result<BootstrapSummary> {
    if resamples < 2 {
        return Err(Error::InvalidSpec("bootstrap needs at least two resamples".into()));
    }
    let labels = data.stratum_index();
    let z = data.z();
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); 2 * data.s()];
    for i in 0..data.n() {
        cells[2 * labels[i] + z[i] as usize].push(i);
    }
    let draws: Vec<Option<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut rows = Vec::with_capacity(data.n());
            for c in &cells {
                rows.extend((0..c.len()).map(|_| *c.choose(&mut rng).expect("non-empty cell")));
            }
            data.subset(&rows).and_then(|d| fit_sre_adjusted(&d, r)).ok().map(|f| f.tau_c)
        })
        .collect();
    let mut ok: Vec<f64> = draws.iter().flatten().copied().collect();
    let failures = resamples - ok.len();
    if ok.len() < 2 {
        return Err(Error::InvalidSpec("every bootstrap resample failed".into()));
    }
    ok.sort_by(f64::total_cmp);
    let law = crate::wchi2::EmpiricalLaw::from_draws(ok.clone());
    let m = ok.iter().sum::<f64>() / ok.len() as f64;
    let var = ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (ok.len() - 1) as f64;
    Ok(BootstrapSummary {
        resamples,
        failures,
        seed,
        mean: m,
        std_error: var.sqrt(),
        lower: law.quantile(0.5 * alpha),
        upper: law.quantile(1.0 - 0.5 * alpha),
        level: 1.0 - alpha,
    })
}

/// Analytic interval for fixed r <= 0; bootstrap percentile interval for
/// r > 0 or the plug-in r_opt.
pub fn confidence_interval_sre_adjusted(
    fit: &SreAdjustedFit,
    data: &StudyData,
    r: RChoice,
    spec: &CiSpec,
) -> Result<ConfInterval> {
    spec.validate()?;
    match r {
        RChoice::Fixed(rv) if rv <= 0.0 => {
            let wald = wald_sre_adjusted(fit, data)?;
            let law = gamma_sre_adjusted(fit, rv)?;
            let inp = InferenceInputs {
                tau_c: fit.tau_c,
                v: variance_sre_adjusted(fit, data, rv)?,
                null_law: Some(&law),
                n: data.n(),
                wald_p: wald.wald.p_value,
            };
            inference::confidence_interval(&inp, spec)
        }
        _ => {
            let bs = bootstrap_sre_adjusted(data, r, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED, spec.alpha)?;
            Ok(ConfInterval {
                lower: bs.lower,
                upper: bs.upper,
                method: IntervalKind::Bootstrap,
                level: bs.level,
                regime_note: format!(
                    "stratified bootstrap percentile interval ({} resamples, {} failed)",
                    bs.resamples, bs.failures
                ),
                mc_approximated: true,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Observational studies.

/// Weighted z on (1, x, y) and y on (1, z, x); inference reuses [`crate::obs`]
/// with x-partialled moments.
pub fn fit_obs_adjusted(data: &StudyData, source: WeightSource) -> Result<ObsFit> {
    obs::fit_partialled(data, source, &with_intercept(&data.x_or_empty()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cre;

    fn toy() -> StudyData {
        StudyData::new(
            DVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(4, 1, &[2.0, 4.0, 1.0, 3.0]),
            None,
            None,
            None,
        )
        .unwrap()
    }

    #[test]
    fn empty_covariates_reduce_to_cre() {
        let d = toy();
        let a = fit_cre_adjusted(&d).unwrap();
        let c = cre::fit(&d).unwrap();
        assert!((a.tau_c_a - c.tau_c).abs() < 1e-12);
        let va = variance_cre_adjusted(&a, &d);
        let vc = cre::variance_normal(&c, &d);
        assert!((va - vc).abs() <= 1e-10 * vc.abs().max(1.0));
    }

    #[test]
    fn r_parses() {
        assert_eq!("opt".parse::<RChoice>().unwrap(), RChoice::Opt);
        assert_eq!("-0.5".parse::<RChoice>().unwrap(), RChoice::Fixed(-0.5));
        assert!("nan".parse::<RChoice>().is_err());
    }
}
