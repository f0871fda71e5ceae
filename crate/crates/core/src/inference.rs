//! Shared inference: sandwich Wald tests, the null weighted chi-squared law
//! with a Monte Carlo fallback, and the normal / chi-squared / union /
//! two-step confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numkernel::{inv_sqrt_psd, solve_vec, sym_eigen};
use crate::wchi2::{EmpiricalLaw, WeightedChiSq};

/// Draws used when the weighted chi-squared CDF cannot be integrated.
pub const MC_FALLBACK_DRAWS: usize = 1_000_000;
/// Seed for the fallback sampler.
pub const MC_FALLBACK_SEED: u64 = 0x5eed_c0de;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Upper tail of chi2(df) at `stat`.
pub fn chi2_upper(stat: f64, df: usize) -> f64 {
    if !(stat > 0.0) {
        return 1.0;
    }
    ChiSquared::new(df as f64).map_or(f64::NAN, |c| c.sf(stat))
}

/// Wald statistic for coefficients whose sandwich covariance is
/// n^{-1} A^{-1} M A^{-1}: n (A b)^T M^{-1} (A b).
pub fn wald_sandwich(
    beta: &DVector<f64>,
    bread: &DMatrix<f64>,
    meat: &DMatrix<f64>,
    n: usize,
    df: usize,
) -> Result<WaldResult> {
    let ab = bread * beta;
    if ab.iter().all(|v| *v == 0.0) {
        return Ok(WaldResult { statistic: 0.0, df, p_value: 1.0 });
    }
    let x = solve_vec(meat, &ab)?;
    let statistic = (n as f64 * ab.dot(&x)).max(0.0);
    Ok(WaldResult { statistic, df, p_value: chi2_upper(statistic, df) })
}

/// Wald statistic with an explicit covariance matrix: b^T V^{-1} b.
pub fn wald_with_cov(beta: &DVector<f64>, cov: &DMatrix<f64>, df: usize) -> Result<WaldResult> {
    if beta.iter().all(|v| *v == 0.0) {
        return Ok(WaldResult { statistic: 0.0, df, p_value: 1.0 });
    }
    let x = solve_vec(cov, beta)?;
    let statistic = beta.dot(&x).max(0.0);
    Ok(WaldResult { statistic, df, p_value: chi2_upper(statistic, df) })
}

/// scale * A^{-1/2} M A^{-1/2}.
pub fn gamma_matrix(scale: f64, a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = inv_sqrt_psd(a)?;
    let mut g = &r * m * &r * scale;
    crate::numkernel::symmetrize(&mut g);
    Ok(g)
}

/// Eigenvalues of a symmetric matrix as a weighted chi-squared law.
pub fn spectrum_of(gamma: &DMatrix<f64>) -> Result<WeightedChiSq> {
    let eig = sym_eigen(gamma)?;
    WeightedChiSq::new(&eig.lambdas)
}

/// Quantiles of `dist` at the requested levels, retrying with the Monte Carlo
/// sampler if numerical integration fails.
pub fn quantiles_with_fallback(dist: &WeightedChiSq, levels: &[f64]) -> Result<(Vec<f64>, bool)> {
    let exact: Result<Vec<f64>> = levels.iter().map(|&p| dist.quantile(p)).collect();
    match exact {
        Ok(q) => Ok((q, false)),
        Err(Error::IntegrationFailure(_)) => {
            let law = EmpiricalLaw::from_draws(dist.sample(MC_FALLBACK_DRAWS, MC_FALLBACK_SEED));
            Ok((levels.iter().map(|&p| law.quantile(p)).collect(), true))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CiMethod {
    AutoTwoStep,
    Normal,
    Chi2,
    Union,
}

impl CiMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            CiMethod::AutoTwoStep => "auto",
            CiMethod::Normal => "normal",
            CiMethod::Chi2 => "chi2",
            CiMethod::Union => "union",
        }
    }
}

impl std::str::FromStr for CiMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(CiMethod::AutoTwoStep),
            "normal" => Ok(CiMethod::Normal),
            "chi2" => Ok(CiMethod::Chi2),
            "union" => Ok(CiMethod::Union),
            other => Err(Error::InvalidSpec(format!("unknown interval method `{other}`"))),
        }
    }
}

/// Interval construction choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiSpec {
    pub method: CiMethod,
    pub alpha: f64,
    /// Pre-test level for the two-step interval; defaults to alpha / 2.
    pub eta: Option<f64>,
}

impl Default for CiSpec {
    fn default() -> Self {
        CiSpec { method: CiMethod::AutoTwoStep, alpha: 0.05, eta: None }
    }
}

impl CiSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta <= self.alpha) {
                return Err(Error::InvalidSpec(format!("eta = {eta} must lie in (0, alpha]")));
            }
        }
        Ok(())
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(0.5 * self.alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntervalKind {
    Normal,
    Chi2,
    Union,
    TwoStep,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfInterval {
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalKind,
    /// Nominal confidence of the returned interval.
    pub level: f64,
    pub regime_note: String,
    /// True when chi-squared quantiles came from the Monte Carlo fallback.
    pub mc_approximated: bool,
}

/// tau_c -/+ z_{1 - sig/2} sqrt(V / n).
pub fn normal_interval(tau_c: f64, v: f64, n: usize, sig: f64) -> (f64, f64) {
    if sig <= 0.0 {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let z = Normal::standard().inverse_cdf(1.0 - 0.5 * sig);
    let half = z * (v.max(0.0) / n as f64).sqrt();
    (tau_c - half, tau_c + half)
}

/// [tau_c - Q(1 - sig/2) / n, tau_c - Q(sig/2) / n].
pub fn chi2_interval(tau_c: f64, dist: &WeightedChiSq, n: usize, sig: f64) -> Result<((f64, f64), bool)> {
    if sig <= 0.0 {
        return Ok(((f64::NEG_INFINITY, f64::INFINITY), false));
    }
    let (q, mc) = quantiles_with_fallback(dist, &[0.5 * sig, 1.0 - 0.5 * sig])?;
    let nf = n as f64;
    Ok(((tau_c - q[1] / nf, tau_c - q[0] / nf), mc))
}

/// Everything an interval needs from one fitted design.
#[derive(Debug, Clone)]
pub struct InferenceInputs<'a> {
    pub tau_c: f64,
    /// Variance of the normal regime (sqrt(n) scale).
    pub v: f64,
    /// Null law of n * tau_c.
    pub null_law: Option<&'a WeightedChiSq>,
    pub n: usize,
    pub wald_p: f64,
}

fn need_law<'a>(inp: &InferenceInputs<'a>) -> Result<&'a WeightedChiSq> {
    inp.null_law.ok_or_else(|| Error::InvalidSpec("a chi-squared interval needs the null spectrum".into()))
}

/// Interval per `spec`.
pub fn confidence_interval(inp: &InferenceInputs<'_>, spec: &CiSpec) -> Result<ConfInterval> {
    spec.validate()?;
    let alpha = spec.alpha;
    match spec.method {
        CiMethod::Normal => {
            let (lower, upper) = normal_interval(inp.tau_c, inp.v, inp.n, alpha);
            Ok(ConfInterval {
                lower,
                upper,
                method: IntervalKind::Normal,
                level: 1.0 - alpha,
                regime_note: "normal regime (valid when tau != 0)".into(),
                mc_approximated: false,
            })
        }
        CiMethod::Chi2 => {
            let ((lower, upper), mc) = chi2_interval(inp.tau_c, need_law(inp)?, inp.n, alpha)?;
            Ok(ConfInterval {
                lower,
                upper,
                method: IntervalKind::Chi2,
                level: 1.0 - alpha,
                regime_note: "weighted chi-squared regime (valid when tau = 0)".into(),
                mc_approximated: mc,
            })
        }
        CiMethod::Union => {
            let (nl, nu) = normal_interval(inp.tau_c, inp.v, inp.n, alpha);
            let ((cl, cu), mc) = chi2_interval(inp.tau_c, need_law(inp)?, inp.n, alpha)?;
            Ok(ConfInterval {
                lower: nl.min(cl),
                upper: nu.max(cu),
                method: IntervalKind::Union,
                level: 1.0 - alpha,
                regime_note: "convex hull of the normal and weighted chi-squared intervals".into(),
                mc_approximated: mc,
            })
        }
        CiMethod::AutoTwoStep => {
            let eta = spec.eta();
            let sig = alpha - eta;
            let level = 1.0 - sig;
            if inp.wald_p < eta {
                let (lower, upper) = normal_interval(inp.tau_c, inp.v, inp.n, sig);
                Ok(ConfInterval {
                    lower,
                    upper,
                    method: IntervalKind::TwoStep,
                    level,
                    regime_note: format!("Wald pre-test rejected at eta = {eta}; normal regime"),
                    mc_approximated: false,
                })
            } else {
                let ((lower, upper), mc) = chi2_interval(inp.tau_c, need_law(inp)?, inp.n, sig)?;
                Ok(ConfInterval {
                    lower,
                    upper,
                    method: IntervalKind::TwoStep,
                    level,
                    regime_note: format!("Wald pre-test not rejected at eta = {eta}; weighted chi-squared regime"),
                    mc_approximated: mc,
                })
            }
        }
    }
}
