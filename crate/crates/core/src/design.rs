//! Design tags and identity-check records shared by the estimators.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    Cre,
    SreReg,
    SreStrat,
    Obs,
}

impl Design {
    pub fn as_str(self) -> &'static str {
        match self {
            Design::Cre => "cre",
            Design::SreReg => "sre-reg",
            Design::SreStrat => "sre-strat",
            Design::Obs => "obs",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "cre" => Ok(Design::Cre),
            "sre-reg" => Ok(Design::SreReg),
            "sre-strat" => Ok(Design::SreStrat),
            "obs" => Ok(Design::Obs),
            other => Err(crate::Error::InvalidSpec(format!("unknown design `{other}`"))),
        }
    }
}

/// Residual of one exact algebraic identity evaluated on the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Relative residual; `None` when the check was skipped.
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl IdentityCheck {
    pub fn value(name: &str, residual: f64) -> Self {
        IdentityCheck { name: name.into(), residual: Some(residual), note: None }
    }

    pub fn skipped(name: &str, note: impl Into<String>) -> Self {
        IdentityCheck { name: name.into(), residual: None, note: Some(note.into()) }
    }
}

/// Largest residual among checks that ran.
pub fn worst_residual(checks: &[IdentityCheck]) -> f64 {
    checks.iter().filter_map(|c| c.residual).fold(0.0, f64::max)
}

/// ||a - b|| / max(||a||, ||b||, floor).
pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>, floor: f64) -> f64 {
    let d = (a - b).norm();
    let s = a.norm().max(b.norm()).max(floor);
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Scalar counterpart of [`rel_diff`].
pub fn rel_diff_scalar(a: f64, b: f64, floor: f64) -> f64 {
    let s = a.abs().max(b.abs()).max(floor);
    if s == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / s
    }
}

/// Distance of a composite effect from [0, 1).
pub fn unit_interval_violation(tau_c: f64) -> f64 {
    if tau_c < 0.0 {
        -tau_c
    } else if tau_c >= 1.0 {
        tau_c - 1.0 + f64::EPSILON
    } else {
        0.0
    }
}

/// Floor for relative checks on composite effects, which are dimensionless.
pub const TAU_C_FLOOR: f64 = 1e-12;
