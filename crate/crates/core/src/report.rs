//! Versioned JSON reports. Floats are written with 17 significant digits so
//! every value round-trips; non-finite values become null.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::analysis::Estimate;
use crate::dataset::StudyData;
use crate::design::IdentityCheck;
use crate::error::{Error, Result};
use crate::inference::{ConfInterval, WaldResult};

pub const SCHEMA_VERSION: &str = "1";

/// `v` in scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    if !v.is_finite() {
        return "null".into();
    }
    if v == 0.0 {
        // Keep the sign of zero out of golden files.
        return "0.0000000000000000e0".into();
    }
    format!("{v:.16e}")
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(num) => {
            if num.is_f64() {
                out.push_str(&format_f64(num.as_f64().unwrap_or(f64::NAN)));
            } else {
                let _ = write!(out, "{num}");
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Numeric vectors stay on one line.
            if items.iter().all(|x| x.is_number() || x.is_null()) {
                out.push('[');
                for (i, x) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    write_value(out, x, indent);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (i, x) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, x, indent + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, x)) in map.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, x, indent + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::InvalidSpec(format!("serialization: {e}")))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub schema_version: &'static str,
    pub design: String,
    pub estimator: String,
    pub n: usize,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub outcomes: Vec<String>,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_c: f64,
    pub wald: WaldResult,
    /// Normal-regime asymptotic variance of sqrt(n) tau_c.
    pub variance: Option<f64>,
    /// Weights of the null weighted chi-squared law of n tau_c.
    pub null_spectrum: Option<Vec<f64>>,
    pub ci: Option<ConfInterval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_note: Option<String>,
    pub warnings: Vec<String>,
    pub identity_checks: Vec<IdentityCheck>,
    pub details: Map<String, Value>,
}

impl AnalysisReport {
    /// Assemble a report; `ci` carries either the interval or why there is none.
    pub fn new(data: &StudyData, est: &Estimate, ci: std::result::Result<ConfInterval, String>) -> Self {
        let mut warnings = est.warnings.clone();
        let (ci, ci_note) = match ci {
            Ok(c) => {
                if c.mc_approximated {
                    warnings.push("chi-squared quantiles approximated by Monte Carlo".into());
                }
                (Some(c), None)
            }
            Err(note) => (None, Some(note)),
        };
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            design: est.spec.design.as_str().into(),
            estimator: est.spec.estimator.as_str().into(),
            n: est.n,
            l: est.l,
            k: est.k,
            s: est.s,
            outcomes: data.outcome_names().to_vec(),
            covariates: data.covariate_names().to_vec(),
            beta: est.beta.iter().copied().collect(),
            tau: est.tau.iter().copied().collect(),
            tau_c: est.tau_c,
            wald: est.wald,
            variance: est.variance,
            null_spectrum: est.null_law.as_ref().map(|l| l.lambdas().to_vec()),
            ci,
            ci_note,
            warnings,
            identity_checks: est.checks.clone(),
            details: est.details.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub schema_version: &'static str,
    pub error: String,
    pub kind: String,
    pub category: &'static str,
}

impl ErrorReport {
    pub fn new(e: &Error) -> Self {
        ErrorReport {
            schema_version: SCHEMA_VERSION,
            error: e.to_string(),
            kind: e.kind().into(),
            category: if e.is_validation() { "validation" } else { "numerical" },
        }
    }
}
