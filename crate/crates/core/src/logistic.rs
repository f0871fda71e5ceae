//! Logistic maximum likelihood by Newton's method. Each step solves the
//! iteratively reweighted least-squares system through QR; step-halving
//! engages only when the log-likelihood decreases.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numkernel::wls;

pub const MAX_ITER: usize = 100;
/// Convergence threshold on the max-norm of the 1/n-scaled score.
pub const SCORE_TOL: f64 = 1e-10;
/// Convergence threshold on the Newton step norm.
pub const STEP_TOL: f64 = 1e-12;
/// A fitted linear predictor beyond this magnitude indicates separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: DVector<f64>,
    /// Fitted probabilities.
    pub probs: DVector<f64>,
    /// Max-norm of n^{-1} X^T (z - p) at the optimum.
    pub score_max_norm: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^eta) without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn log_likelihood(z: &DVector<f64>, eta: &DVector<f64>) -> f64 {
    z.iter().zip(eta.iter()).map(|(&zi, &e)| zi * e - softplus(e)).sum()
}

/// Maximize the logistic likelihood of `z` on `design` (which carries its
/// own intercept or indicator columns) from `start`.
pub fn fit_logistic(z: &DVector<f64>, design: &DMatrix<f64>, start: DVector<f64>) -> Result<LogisticFit> {
    let n = z.len();
    let p = design.ncols();
    if start.len() != p {
        return Err(Error::DimensionMismatch("logistic start vector".into()));
    }
    let nf = n as f64;
    let mut coef = start;
    let mut eta = design * &coef;
    let mut ll = log_likelihood(z, &eta);
    let mut converged = false;
    let mut last_gain = 0.0;
    let mut iterations = 0;
    let mut score_max;
    loop {
        let probs = eta.map(sigmoid);
        let resid = z - &probs;
        let score = design.tr_mul(&resid) / nf;
        score_max = score.amax();
        if score_max <= SCORE_TOL {
            converged = true;
            break;
        }
        if iterations >= MAX_ITER {
            break;
        }
        iterations += 1;
        let w = probs.map(|q| q * (1.0 - q));
        if w.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Separation("fitted probabilities reached 0 or 1".into()));
        }
        let working = resid.component_div(&w);
        let step = wls(&working, design, &w, false)?.coefficients;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &coef + &step * t;
            let cand_eta = design * &cand;
            let cand_ll = log_likelihood(z, &cand_eta);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                last_gain = cand_ll - ll;
                coef = cand;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if step.norm() * t <= STEP_TOL {
            converged = true;
            break;
        }
    }
    let probs = eta.map(sigmoid);
    let fit =
        LogisticFit { coefficients: coef, probs, score_max_norm: score_max, log_likelihood: ll, iterations, converged };
    check_separation(z, design, &fit, last_gain)?;
    Ok(fit)
}

fn check_separation(z: &DVector<f64>, design: &DMatrix<f64>, fit: &LogisticFit, last_gain: f64) -> Result<()> {
    // The linear predictor is invariant to reparametrizing the design, unlike
    // any single coefficient.
    let eta = design * &fit.coefficients;
    let peak = eta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !peak.is_finite() || peak > SEPARATION_BOUND {
        return Err(Error::Separation(format!("linear predictor reaches {peak:.3e} (bound {SEPARATION_BOUND})")));
    }
    if z.iter().zip(fit.probs.iter()).all(|(zi, pi)| (zi - pi).abs() < 1e-6) {
        return Err(Error::Separation("fitted probabilities reproduce the treatment exactly".into()));
    }
    if !fit.converged {
        if last_gain > 0.0 {
            return Err(Error::Separation(format!(
                "no convergence in {} iterations while the likelihood kept increasing",
                fit.iterations
            )));
        }
        return Err(Error::NoConvergence { iterations: fit.iterations });
    }
    Ok(())
}
