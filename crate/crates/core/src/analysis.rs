//! One entry point over every design and estimator: fit, Wald test, normal
//! variance, null spectrum and, on request, a confidence interval.

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use crate::covadj::{self, RChoice};
use crate::cre;
use crate::dataset::StudyData;
use crate::design::{Design, IdentityCheck};
use crate::error::{Error, Result};
use crate::inference::{self, CiSpec, ConfInterval, InferenceInputs, WaldResult};
use crate::invlogit;
use crate::numkernel::sym_eigen;
use crate::obs::{self, ObsFit, WeightSource};
use crate::sre;
use crate::wchi2::WeightedChiSq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Inverse OLS (weighted for observational data).
    Standard,
    /// Covariates enter the inverse regression.
    Adjusted,
    /// Inverse logistic regression; null-only inference.
    InverseLogistic,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Standard => "standard",
            Estimator::Adjusted => "adjusted",
            Estimator::InverseLogistic => "inverse-logistic",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Estimator::Standard),
            "adjusted" => Ok(Estimator::Adjusted),
            "inverse-logistic" => Ok(Estimator::InverseLogistic),
            other => Err(Error::InvalidSpec(format!("unknown estimator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisSpec {
    pub design: Design,
    pub estimator: Estimator,
    /// Observational designs only.
    pub weights: WeightSource,
    /// Adjusted stratified designs only.
    pub r: RChoice,
}

impl AnalysisSpec {
    pub fn new(design: Design) -> Self {
        AnalysisSpec { design, estimator: Estimator::Standard, weights: WeightSource::Estimate, r: RChoice::Fixed(0.0) }
    }

    pub fn validate(&self) -> Result<()> {
        use Design::*;
        use Estimator::*;
        match (self.design, self.estimator) {
            (SreStrat, Adjusted) => Err(Error::InvalidSpec("covariate adjustment is not defined for sre-strat".into())),
            (SreStrat | Obs, InverseLogistic) => Err(Error::InvalidSpec(format!(
                "inverse logistic regression is defined for cre and sre-reg, not {}",
                self.design.as_str()
            ))),
            _ => Ok(()),
        }
    }
}

/// Fitted composite with everything inference needs.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub spec: AnalysisSpec,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub s: usize,
    /// Composite weights on the outcomes.
    pub beta: DVector<f64>,
    pub tau: DVector<f64>,
    pub tau_c: f64,
    pub wald: WaldResult,
    /// Normal-regime variance; absent for the inverse-logistic composite.
    pub variance: Option<f64>,
    /// Matrix whose spectrum is the null law of n * tau_c; absent when it has
    /// no real form (adjusted stratified fit with r > 0).
    pub gamma: Option<DMatrix<f64>>,
    pub null_law: Option<WeightedChiSq>,
    pub warnings: Vec<String>,
    pub checks: Vec<IdentityCheck>,
    /// Design-specific quantities for the report.
    pub details: Map<String, Value>,
}

fn vec_json(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<f64>>())
}

fn mat_json(m: &DMatrix<f64>) -> Value {
    Value::from(m.row_iter().map(|r| Value::from(r.iter().copied().collect::<Vec<f64>>())).collect::<Vec<_>>())
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let dim: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(dim, dim);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    out
}

fn obs_details(fit: &ObsFit) -> Map<String, Value> {
    let mut d = Map::new();
    d.insert("phi_zz".into(), json!(fit.phi_zz));
    d.insert("phi_yy".into(), mat_json(&fit.phi_yy));
    if let Some(s) = &fit.sigma_os_hat {
        d.insert("sigma_hat".into(), mat_json(s));
    }
    match &fit.propensity {
        obs::Propensity::Estimated(p) => {
            d.insert("propensity".into(), json!("estimated"));
            d.insert("propensity_alpha".into(), vec_json(&p.alpha));
            d.insert("propensity_iterations".into(), json!(p.iterations));
            d.insert("propensity_min".into(), json!(p.scores.min()));
            d.insert("propensity_max".into(), json!(p.scores.max()));
        }
        obs::Propensity::User => {
            d.insert("propensity".into(), json!("user weights treated as known"));
        }
    }
    d
}

fn obs_estimate(spec: AnalysisSpec, data: &StudyData, fit: ObsFit) -> Result<Estimate> {
    let wald = obs::wald_test_os(&fit)?;
    let variance = obs::variance_normal_os(&fit)?;
    let gamma = obs::gamma_matrix_os(&fit)?;
    let details = obs_details(&fit);
    Ok(Estimate {
        spec,
        n: data.n(),
        l: data.l(),
        k: data.k(),
        s: data.s(),
        beta: fit.beta_os,
        tau: fit.tau_os,
        tau_c: fit.tau_c_os,
        wald,
        variance: Some(variance),
        gamma: Some(gamma),
        null_law: None,
        warnings: fit.warnings,
        checks: fit.checks,
        details,
    })
}

/// Fit and test per `spec`.
pub fn estimate(data: &StudyData, spec: AnalysisSpec) -> Result<Estimate> {
    spec.validate()?;
    let mut est = match (spec.design, spec.estimator) {
        (Design::Cre, Estimator::Standard) => {
            let fit = cre::fit(data)?;
            let mut details = Map::new();
            details.insert("beta0".into(), json!(fit.beta0));
            details.insert("sigma_hat".into(), mat_json(&fit.sigma_hat));
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                wald: cre::wald_test(&fit, data)?,
                variance: Some(cre::variance_normal(&fit, data)),
                gamma: Some(cre::gamma_matrix(&fit, data)?),
                null_law: None,
                warnings: Vec::new(),
                checks: fit.checks.clone(),
                beta: fit.beta,
                tau: fit.tau,
                tau_c: fit.tau_c,
                details,
            }
        }
        (Design::SreReg, Estimator::Standard) => {
            let fit = sre::fit_regression(data)?;
            let mut details = Map::new();
            details.insert("phi_z".into(), json!(fit.phi_z));
            details.insert("phi_y".into(), mat_json(&fit.phi_y));
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                wald: sre::wald_test_sr(&fit, data)?,
                variance: Some(sre::variance_normal_sr(&fit, data)),
                gamma: Some(sre::gamma_matrix_sr(&fit)?),
                null_law: None,
                warnings: Vec::new(),
                checks: fit.checks.clone(),
                beta: fit.beta_sr,
                tau: fit.tau_sr,
                tau_c: fit.tau_c_sr,
                details,
            }
        }
        (Design::SreStrat, Estimator::Standard) => {
            let fit = sre::fit_stratification(data)?;
            let inf = sre::stratification_inference(&fit, data)?;
            let blocks = fit
                .strata
                .iter()
                .map(|s| {
                    cre::gamma_matrix(&s.fit, &s.data)
                        .map_err(|e| Error::InStratum { label: s.label.clone(), source: Box::new(e) })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut details = Map::new();
            let per: Vec<Value> = fit
                .strata
                .iter()
                .map(|s| {
                    json!({
                        "label": s.label,
                        "size": s.size,
                        "beta": vec_json(&s.fit.beta),
                        "tau": vec_json(&s.fit.tau),
                        "tau_c": s.fit.tau_c,
                    })
                })
                .collect();
            details.insert("strata".into(), Value::from(per));
            // Size-weighted averages stand in for the pooled weights and effects.
            let n = data.n() as f64;
            let mut beta = DVector::zeros(data.l());
            let mut tau = DVector::zeros(data.l());
            for s in &fit.strata {
                beta += &s.fit.beta * (s.size as f64 / n);
                tau += &s.fit.tau * (s.size as f64 / n);
            }
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                beta,
                tau,
                tau_c: fit.tau_c,
                wald: inf.wald,
                variance: Some(inf.variance),
                gamma: Some(block_diag(&blocks)),
                null_law: Some(inf.null_law),
                warnings: vec![
                    "stratification-strategy Wald statistic is the sum of per-stratum statistics, df = S L".into()
                ],
                checks: fit.checks,
                details,
            }
        }
        (Design::Obs, Estimator::Standard) => {
            let fit = obs::fit(data, spec.weights)?;
            obs_estimate(spec, data, fit)?
        }
        (Design::Cre, Estimator::Adjusted) => {
            let fit = covadj::fit_cre_adjusted(data)?;
            let mut details = Map::new();
            details.insert("beta0".into(), json!(fit.beta0));
            details.insert("beta_x".into(), vec_json(&fit.beta_x));
            details.insert("phi_yy_x".into(), mat_json(&fit.phi_yy_x));
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                wald: covadj::wald_cre_adjusted(&fit)?,
                variance: Some(covadj::variance_cre_adjusted(&fit, data)),
                gamma: Some(covadj::gamma_matrix_cre_adjusted(&fit)?),
                null_law: None,
                warnings: Vec::new(),
                checks: fit.checks.clone(),
                beta: fit.beta_a,
                tau: fit.tau_a,
                tau_c: fit.tau_c_a,
                details,
            }
        }
        (Design::SreReg, Estimator::Adjusted) => {
            let fit = covadj::fit_sre_adjusted(data, spec.r)?;
            let w = covadj::wald_sre_adjusted(&fit, data)?;
            let r = fit.r_used;
            let mut warnings = vec![format!(
                "Wald statistic covers all {} coefficients of (x, y) but is referred to chi2({}); under chi2({}) p = {:.6}",
                w.full_df, w.wald.df, w.full_df, w.p_value_full_df
            )];
            let gamma = if r <= 0.0 {
                Some(covadj::gamma_matrix_sre_adjusted(&fit, r)?)
            } else {
                warnings.push(format!("r = {r} > 0: no analytic null spectrum; intervals use the bootstrap"));
                None
            };
            let mut details = Map::new();
            details.insert("beta_x".into(), vec_json(&fit.beta_x()));
            details.insert("tau_c_y".into(), json!(fit.tau_c_y));
            details.insert("tau_c_x".into(), json!(fit.tau_c_x));
            details.insert("r_used".into(), json!(r));
            if let Some(ro) = fit.r_opt_hat {
                details.insert("r_opt_hat".into(), json!(ro));
            }
            details.insert("wald_full_df_p_value".into(), json!(w.p_value_full_df));
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                beta: fit.beta_y(),
                tau: fit.tau_u.rows(fit.k, data.l()).into_owned(),
                tau_c: fit.tau_c,
                wald: w.wald,
                variance: Some(covadj::variance_sre_adjusted(&fit, data, r)?),
                gamma,
                null_law: None,
                warnings,
                checks: fit.checks,
                details,
            }
        }
        (Design::Obs, Estimator::Adjusted) => {
            let fit = covadj::fit_obs_adjusted(data, spec.weights)?;
            obs_estimate(spec, data, fit)?
        }
        (Design::Cre | Design::SreReg, Estimator::InverseLogistic) => {
            let stratified = spec.design == Design::SreReg;
            let fit = invlogit::fit_logit(data, stratified)?;
            let mut details = Map::new();
            details.insert("gamma_intercepts".into(), vec_json(&fit.gamma_g));
            details.insert("score_max_norm".into(), json!(fit.score.amax()));
            details.insert("iterations".into(), json!(fit.iterations));
            Estimate {
                spec,
                n: data.n(),
                l: data.l(),
                k: data.k(),
                s: data.s(),
                wald: invlogit::wald_logit(&fit, data)?,
                variance: None,
                gamma: Some(invlogit::gamma_matrix_logit(&fit, data)?),
                null_law: None,
                warnings: vec![invlogit::NULL_ONLY.into()],
                checks: Vec::new(),
                beta: fit.gamma.clone(),
                tau: fit.tau.clone(),
                tau_c: fit.tau_c_logit,
                details,
            }
        }
        _ => unreachable!("rejected by AnalysisSpec::validate"),
    };
    if est.null_law.is_none() {
        if let Some(g) = &est.gamma {
            est.null_law = Some(WeightedChiSq::new(&sym_eigen(g)?.lambdas)?);
        }
    }
    if let Some(law) = &est.null_law {
        if law.clamped > 0 {
            est.warnings.push(format!("{} slightly negative null eigenvalues clamped to zero", law.clamped));
        }
        if law.dropped > 0 {
            est.warnings.push(format!("{} negligible null eigenvalues dropped", law.dropped));
        }
    }
    Ok(est)
}

impl Estimate {
    /// Confidence interval for tau_c. Adjusted stratified fits with r > 0 or
    /// the plug-in r_opt fall back to the stratified bootstrap.
    pub fn interval(&self, data: &StudyData, ci: &CiSpec) -> Result<ConfInterval> {
        if self.spec.estimator == Estimator::InverseLogistic {
            return Err(Error::InvalidSpec(format!(
                "no confidence interval for the inverse-logistic composite ({})",
                invlogit::NULL_ONLY
            )));
        }
        let bootstrap = self.spec.design == Design::SreReg
            && self.spec.estimator == Estimator::Adjusted
            && !matches!(self.spec.r, RChoice::Fixed(r) if r <= 0.0);
        if bootstrap {
            let fit = covadj::fit_sre_adjusted(data, self.spec.r)?;
            return covadj::confidence_interval_sre_adjusted(&fit, data, self.spec.r, ci);
        }
        let inp = InferenceInputs {
            tau_c: self.tau_c,
            v: self.variance.unwrap_or(f64::NAN),
            null_law: self.null_law.as_ref(),
            n: self.n,
            wald_p: self.wald.p_value,
        };
        inference::confidence_interval(&inp, ci)
    }
}
