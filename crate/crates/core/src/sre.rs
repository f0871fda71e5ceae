//! Stratified randomized experiments: the regression strategy (inverse OLS of
//! z on stratum indicators and y, via within-stratum centering) and the
//! stratification strategy (per-stratum composites aggregated by n_s / n).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cre::{self, CompositeFit};
use crate::dataset::StudyData;
use crate::design::{rel_diff, rel_diff_scalar, unit_interval_violation, IdentityCheck, TAU_C_FLOOR};
use crate::error::{Error, Result};
use crate::inference::{self, CiSpec, ConfInterval, InferenceInputs, WaldResult};
use crate::numkernel::{
    lstsq, mean_outer, ols, partial_out_strata, solve_vec, stratum_counts, stratum_means, weighted_mean_outer,
};
use crate::wchi2::WeightedChiSq;

#[derive(Debug, Clone)]
pub struct StratifiedFit {
    pub beta_sr: DVector<f64>,
    pub tau_sr: DVector<f64>,
    pub tau_c_sr: f64,
    /// n^{-1} z'(I - H_g) z.
    pub phi_z: f64,
    /// n^{-1} y'(I - H_g) y.
    pub phi_y: DMatrix<f64>,
    /// n^{-1} y'(I - H_g) z.
    pub phi_yz: DVector<f64>,
    /// Residuals of z on (G, y).
    pub residuals: DVector<f64>,
    /// Within-stratum centered outcomes.
    pub y_tilde: DMatrix<f64>,
    pub z_tilde: DVector<f64>,
    pub sizes: Vec<usize>,
    pub treated_share: Vec<f64>,
    pub checks: Vec<IdentityCheck>,
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

/// Dense n x S indicator matrix.
pub fn indicators(labels: &[usize], s: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(labels.len(), s);
    for (i, &l) in labels.iter().enumerate() {
        g[(i, l)] = 1.0;
    }
    g
}

/// Regression strategy.
pub fn fit_regression(data: &StudyData) -> Result<StratifiedFit> {
    let labels = data.stratum_index();
    let s = data.s();
    let n = data.n() as f64;
    let zt_m = partial_out_strata(&col(data.z()), &labels);
    let zt = zt_m.column(0).into_owned();
    let yt = partial_out_strata(data.y(), &labels);

    let inv = ols(&zt, &yt, false)?;
    let beta_sr = inv.coefficients;
    let fwd = lstsq(&zt_m, &yt)?;
    let tau_sr = fwd.coefficients.row(0).transpose();
    let tau_c_sr = beta_sr.dot(&tau_sr);

    let phi_z = zt.dot(&zt) / n;
    let phi_y = mean_outer(&yt);
    let phi_yz = yt.tr_mul(&zt) / n;
    let sizes = stratum_counts(&labels, s);
    let zbar_s = stratum_means(&col(data.z()), &labels, s);
    let treated_share: Vec<f64> = (0..s).map(|k| zbar_s[(k, 0)]).collect();

    let mut checks = Vec::new();
    let prop = solve_vec(&phi_y, &tau_sr)? * phi_z;
    checks.push(IdentityCheck::value("beta_sr = phi_z phi_y^-1 tau_sr", rel_diff(&beta_sr, &prop, 0.0)));
    let pooled: f64 = (0..s).map(|k| sizes[k] as f64 / n * treated_share[k] * (1.0 - treated_share[k])).sum();
    checks.push(IdentityCheck::value("phi_z = sum pi_s zbar_s (1 - zbar_s)", rel_diff_scalar(phi_z, pooled, 1e-300)));
    let design = crate::numkernel::hcat(&[&indicators(&labels, s), &col(data.z())]);
    let direct = lstsq(&design, data.y())?;
    checks.push(IdentityCheck::value(
        "tau_sr equals the z coefficient of y on (G, z)",
        rel_diff(&direct.coefficients.row(s).transpose(), &tau_sr, 0.0),
    ));
    let yc = partial_out_strata(&col(&(data.y() * &beta_sr)), &labels);
    let two_step = lstsq(&zt_m, &yc)?.coefficients[(0, 0)];
    checks
        .push(IdentityCheck::value("two-step composite regression", rel_diff_scalar(two_step, tau_c_sr, TAU_C_FLOOR)));
    checks.push(IdentityCheck::value("tau_c in [0, 1)", unit_interval_violation(tau_c_sr)));

    Ok(StratifiedFit {
        beta_sr,
        tau_sr,
        tau_c_sr,
        phi_z,
        phi_y,
        phi_yz,
        residuals: inv.residuals,
        y_tilde: yt,
        z_tilde: zt,
        sizes,
        treated_share,
        checks,
    })
}

/// HC0 Wald test of beta_sr = 0 with chi2(L) reference.
pub fn wald_test_sr(fit: &StratifiedFit, data: &StudyData) -> Result<WaldResult> {
    let meat = weighted_mean_outer(&fit.y_tilde, &fit.residuals.map(|e| e * e));
    inference::wald_sandwich(&fit.beta_sr, &fit.phi_y, &meat, data.n(), data.l())
}

/// Normal-regime variance from the per-stratum influence terms r_[s]i.
pub fn variance_normal_sr(fit: &StratifiedFit, data: &StudyData) -> f64 {
    let labels = data.stratum_index();
    let s = data.s();
    let n = data.n();
    let b = &fit.beta_sr;
    let by = &fit.y_tilde * b;
    // b' S_yy|s b per stratum.
    let mut bsb_s = vec![0.0; s];
    for i in 0..n {
        bsb_s[labels[i]] += by[i] * by[i];
    }
    for k in 0..s {
        bsb_s[k] /= fit.sizes[k] as f64;
    }
    let bpb = b.dot(&(&fit.phi_y * b));
    let z = data.z();
    let mean_sq: f64 = (0..n)
        .map(|i| {
            let k = labels[i];
            let p = fit.treated_share[k];
            let szz = p * (1.0 - p);
            let dz = (z[i] - p).powi(2) - szz;
            let br = by[i] * by[i] - bsb_s[k] - dz / fit.phi_z * bpb + 2.0 * fit.residuals[i] * by[i];
            br * br
        })
        .sum::<f64>()
        / n as f64;
    mean_sq / (fit.phi_z * fit.phi_z)
}

pub fn gamma_matrix_sr(fit: &StratifiedFit) -> Result<DMatrix<f64>> {
    let meat = weighted_mean_outer(&fit.y_tilde, &fit.residuals.map(|e| e * e));
    inference::gamma_matrix(1.0 / fit.phi_z, &fit.phi_y, &meat)
}

pub fn gamma_null_sr(fit: &StratifiedFit) -> Result<WeightedChiSq> {
    inference::spectrum_of(&gamma_matrix_sr(fit)?)
}

pub fn confidence_interval_sr(fit: &StratifiedFit, data: &StudyData, spec: &CiSpec) -> Result<ConfInterval> {
    let wald = wald_test_sr(fit, data)?;
    let law = gamma_null_sr(fit)?;
    let inp = InferenceInputs {
        tau_c: fit.tau_c_sr,
        v: variance_normal_sr(fit, data),
        null_law: Some(&law),
        n: data.n(),
        wald_p: wald.p_value,
    };
    inference::confidence_interval(&inp, spec)
}

/// One stratum of the stratification strategy.
#[derive(Debug, Clone)]
pub struct StratumFit {
    pub label: String,
    pub size: usize,
    pub data: StudyData,
    pub fit: CompositeFit,
}

#[derive(Debug, Clone)]
pub struct StratificationFit {
    pub strata: Vec<StratumFit>,
    /// sum_s (n_s / n) tau_c_[s].
    pub tau_c: f64,
    pub checks: Vec<IdentityCheck>,
}

/// Stratification strategy: a separate composite in each stratum.
pub fn fit_stratification(data: &StudyData) -> Result<StratificationFit> {
    let (members, labels) = match data.strata() {
        Some(st) => (st.members(), st.labels.clone()),
        None => (vec![(0..data.n()).collect()], vec!["1".to_string()]),
    };
    let strata: Vec<StratumFit> = members
        .par_iter()
        .zip(labels.par_iter())
        .map(|(rows, label)| {
            let wrap = |e: Error| Error::InStratum { label: label.clone(), source: Box::new(e) };
            let sub = data.subset(rows).and_then(|d| d.without_strata()).map_err(wrap)?;
            let fit = cre::fit(&sub).map_err(wrap)?;
            Ok(StratumFit { label: label.clone(), size: rows.len(), data: sub, fit })
        })
        .collect::<Result<_>>()?;
    let n = data.n() as f64;
    let tau_c = strata.iter().map(|s| s.size as f64 / n * s.fit.tau_c).sum();
    let mut checks: Vec<IdentityCheck> = Vec::new();
    for s in &strata {
        for c in &s.fit.checks {
            checks.push(IdentityCheck { name: format!("stratum {}: {}", s.label, c.name), ..c.clone() });
        }
    }
    Ok(StratificationFit { strata, tau_c, checks })
}

/// Per-stratum inference pieces of the stratification strategy.
#[derive(Debug, Clone)]
pub struct StratificationInference {
    /// Sum of per-stratum Wald statistics against chi2(S L).
    pub wald: WaldResult,
    /// sum_s pi_s V_s.
    pub variance: f64,
    /// Concatenated per-stratum spectra: n tau_c = sum_s n_s tau_c_[s].
    pub null_law: WeightedChiSq,
    pub raw_spectrum: Vec<f64>,
}

pub fn stratification_inference(fit: &StratificationFit, data: &StudyData) -> Result<StratificationInference> {
    let n = data.n() as f64;
    let mut stat = 0.0;
    let mut variance = 0.0;
    let mut lambdas = Vec::new();
    for s in &fit.strata {
        let wrap = |e: Error| Error::InStratum { label: s.label.clone(), source: Box::new(e) };
        let w = cre::wald_test(&s.fit, &s.data).map_err(wrap)?;
        stat += w.statistic;
        let pi = s.size as f64 / n;
        variance += pi * cre::variance_normal(&s.fit, &s.data);
        let g = cre::gamma_matrix(&s.fit, &s.data).map_err(wrap)?;
        lambdas.extend(crate::numkernel::sym_eigen(&g).map_err(wrap)?.lambdas);
    }
    let df = data.l() * fit.strata.len();
    let null_law = WeightedChiSq::new(&lambdas)?;
    Ok(StratificationInference {
        wald: WaldResult { statistic: stat, df, p_value: inference::chi2_upper(stat, df) },
        variance,
        null_law,
        raw_spectrum: lambdas,
    })
}

pub fn confidence_interval_strat(fit: &StratificationFit, data: &StudyData, spec: &CiSpec) -> Result<ConfInterval> {
    let inf = stratification_inference(fit, data)?;
    let inp = InferenceInputs {
        tau_c: fit.tau_c,
        v: inf.variance,
        null_law: Some(&inf.null_law),
        n: data.n(),
        wald_p: inf.wald.p_value,
    };
    inference::confidence_interval(&inp, spec)
}
