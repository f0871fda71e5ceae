//! C ABI over the composite-ate estimators.
//!
//! Data and fits live behind opaque handles that the caller releases with the
//! matching `_free` function. Every fallible call returns a `CaStatus`; the
//! message of the last failure on the calling thread is available from
//! `ca_last_error_message`. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};

use composite_ate::analysis::{estimate, AnalysisSpec, Estimate, Estimator};
use composite_ate::covadj::RChoice;
use composite_ate::dataset::{Strata, StudyData};
use composite_ate::design::Design;
use composite_ate::inference::{CiMethod, CiSpec};
use composite_ate::obs::WeightSource;
use composite_ate::wchi2::WeightedChiSq;
use composite_ate::Error;

/// Bumped on any incompatible change to this interface.
pub const CA_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaStatus {
    Ok = 0,
    NullPointer = 1,
    /// Rejected input; mirrors exit code 2 of the command-line tool.
    Validation = 2,
    /// Numerical failure; mirrors exit code 3 of the command-line tool.
    Numerical = 3,
    /// A Rust panic was caught at the boundary.
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaDesign {
    Cre = 0,
    SreReg = 1,
    SreStrat = 2,
    Obs = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaEstimator {
    Standard = 0,
    Adjusted = 1,
    InverseLogistic = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaCiMethod {
    Auto = 0,
    Normal = 1,
    Chi2 = 2,
    Union = 3,
}

/// Opaque study data.
pub struct CaDataset {
    inner: StudyData,
}

/// Opaque fitted composite; keeps its own copy of the data.
pub struct CaEstimate {
    inner: Estimate,
    data: StudyData,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CaWald {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CaInterval {
    pub lower: f64,
    pub upper: f64,
    /// Nominal level of the returned interval.
    pub level: f64,
    /// 1 when chi-squared quantiles came from the Monte Carlo fallback.
    pub mc_approximated: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CaStatus {
    set_error(e.to_string());
    if e.is_validation() {
        CaStatus::Validation
    } else {
        CaStatus::Numerical
    }
}

/// Run `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CaStatus>) -> CaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CaStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            CaStatus::Panic
        }
    }
}

fn null_check<T>(p: *const T, what: &str) -> Result<(), CaStatus> {
    if p.is_null() {
        set_error(format!("{what} is null"));
        return Err(CaStatus::NullPointer);
    }
    Ok(())
}

fn lift<T>(r: composite_ate::Result<T>) -> Result<T, CaStatus> {
    r.map_err(|e| status_of(&e))
}

/// Version of this interface.
#[no_mangle]
pub extern "C" fn ca_abi_version() -> u32 {
    CA_ABI_VERSION
}

/// Message of the last failed call on this thread, or null if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ca_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Build a data set from `n` units.
///
/// `z` has n entries, `y` is n x l, `x` is n x k (null when k = 0),
/// `strata` holds n integer labels (nullable), `weights` n positive
/// inverse-propensity weights (nullable).
///
/// # Safety
/// Every non-null pointer must reference the stated number of values, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ca_dataset_new(
    n: usize,
    l: usize,
    z: *const f64,
    y: *const f64,
    k: usize,
    x: *const f64,
    strata: *const i64,
    weights: *const f64,
    out: *mut *mut CaDataset,
) -> CaStatus {
    guard(|| {
        null_check(out, "out")?;
        null_check(z, "z")?;
        null_check(y, "y")?;
        if k > 0 {
            null_check(x, "x")?;
        }
        let zv = DVector::from_column_slice(slice::from_raw_parts(z, n));
        let ym = DMatrix::from_row_slice(n, l, slice::from_raw_parts(y, n * l));
        let xm = (k > 0).then(|| DMatrix::from_row_slice(n, k, slice::from_raw_parts(x, n * k)));
        let st = (!strata.is_null()).then(|| {
            let raw: Vec<String> = slice::from_raw_parts(strata, n).iter().map(i64::to_string).collect();
            Strata::from_labels(&raw)
        });
        let w = (!weights.is_null()).then(|| DVector::from_column_slice(slice::from_raw_parts(weights, n)));
        let data = lift(StudyData::new(zv, ym, xm, st, w))?;
        *out = Box::into_raw(Box::new(CaDataset { inner: data }));
        Ok(())
    })
}

/// Release a data set; null is ignored.
///
/// # Safety
/// `data` must come from `ca_dataset_new` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ca_dataset_free(data: *mut CaDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Fit a composite. `r` is the covariate coefficient of the adjusted
/// stratified estimator; pass NaN for the estimated optimum.
///
/// # Safety
/// `data` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate(
    data: *const CaDataset,
    design: CaDesign,
    estimator: CaEstimator,
    user_weights: i32,
    r: f64,
    out: *mut *mut CaEstimate,
) -> CaStatus {
    guard(|| {
        null_check(data, "data")?;
        null_check(out, "out")?;
        let spec = AnalysisSpec {
            design: match design {
                CaDesign::Cre => Design::Cre,
                CaDesign::SreReg => Design::SreReg,
                CaDesign::SreStrat => Design::SreStrat,
                CaDesign::Obs => Design::Obs,
            },
            estimator: match estimator {
                CaEstimator::Standard => Estimator::Standard,
                CaEstimator::Adjusted => Estimator::Adjusted,
                CaEstimator::InverseLogistic => Estimator::InverseLogistic,
            },
            weights: if user_weights != 0 { WeightSource::User } else { WeightSource::Estimate },
            r: if r.is_nan() { RChoice::Opt } else { RChoice::Fixed(r) },
        };
        lift(spec.validate())?;
        let d = &(*data).inner;
        let est = lift(estimate(d, spec))?;
        *out = Box::into_raw(Box::new(CaEstimate { inner: est, data: d.clone() }));
        Ok(())
    })
}

/// Release a fit; null is ignored.
///
/// # Safety
/// `est` must come from `ca_estimate` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_free(est: *mut CaEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Estimated composite effect.
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_tau_c(est: *const CaEstimate, out: *mut f64) -> CaStatus {
    guard(|| {
        null_check(est, "est")?;
        null_check(out, "out")?;
        *out = (*est).inner.tau_c;
        Ok(())
    })
}

/// Number of outcomes L, the length of the composite weights.
///
/// # Safety
/// `est` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_outcomes(est: *const CaEstimate) -> usize {
    if est.is_null() {
        0
    } else {
        (*est).inner.beta.len()
    }
}

/// Copy the composite weights into `buf`, which must hold `len` values with
/// `len` at least the number of outcomes.
///
/// # Safety
/// `est` must be a live handle and `buf` writable for `len` values.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_beta(est: *const CaEstimate, buf: *mut f64, len: usize) -> CaStatus {
    guard(|| {
        null_check(est, "est")?;
        null_check(buf, "buf")?;
        let beta = &(*est).inner.beta;
        if len < beta.len() {
            set_error(format!("buffer holds {len} values, {} needed", beta.len()));
            return Err(CaStatus::Validation);
        }
        slice::from_raw_parts_mut(buf, beta.len()).copy_from_slice(beta.as_slice());
        Ok(())
    })
}

/// Wald test of no effect.
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_wald(est: *const CaEstimate, out: *mut CaWald) -> CaStatus {
    guard(|| {
        null_check(est, "est")?;
        null_check(out, "out")?;
        let w = (*est).inner.wald;
        *out = CaWald { statistic: w.statistic, df: w.df, p_value: w.p_value };
        Ok(())
    })
}

/// Confidence interval for the composite effect. `eta` below zero selects
/// the default pre-test level alpha / 2.
///
/// # Safety
/// `est` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ca_estimate_interval(
    est: *const CaEstimate,
    method: CaCiMethod,
    alpha: f64,
    eta: f64,
    out: *mut CaInterval,
) -> CaStatus {
    guard(|| {
        null_check(est, "est")?;
        null_check(out, "out")?;
        if !(alpha > 0.0 && alpha < 1.0) {
            set_error("alpha must lie in (0, 1)".into());
            return Err(CaStatus::Validation);
        }
        let spec = CiSpec {
            method: match method {
                CaCiMethod::Auto => CiMethod::AutoTwoStep,
                CaCiMethod::Normal => CiMethod::Normal,
                CaCiMethod::Chi2 => CiMethod::Chi2,
                CaCiMethod::Union => CiMethod::Union,
            },
            alpha,
            eta: (eta >= 0.0).then_some(eta),
        };
        let e = &*est;
        let ci = lift(e.inner.interval(&e.data, &spec))?;
        *out = CaInterval {
            lower: ci.lower,
            upper: ci.upper,
            level: ci.level,
            mc_approximated: ci.mc_approximated as i32,
        };
        Ok(())
    })
}

fn wchi2_law(lambdas: *const f64, len: usize) -> Result<WeightedChiSq, CaStatus> {
    null_check(lambdas, "lambdas")?;
    // SAFETY: the caller guarantees `len` readable values.
    let raw = unsafe { slice::from_raw_parts(lambdas, len) };
    lift(WeightedChiSq::new(raw))
}

/// CDF of sum_j lambda_j chi2_1 at `t`.
///
/// # Safety
/// `lambdas` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ca_wchi2_cdf(lambdas: *const f64, len: usize, t: f64, out: *mut f64) -> CaStatus {
    guard(|| {
        null_check(out, "out")?;
        let law = wchi2_law(lambdas, len)?;
        *out = lift(law.cdf(t))?;
        Ok(())
    })
}

/// Quantile of sum_j lambda_j chi2_1 at probability `p`.
///
/// # Safety
/// `lambdas` must hold `len` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn ca_wchi2_quantile(lambdas: *const f64, len: usize, p: f64, out: *mut f64) -> CaStatus {
    guard(|| {
        null_check(out, "out")?;
        let law = wchi2_law(lambdas, len)?;
        *out = lift(law.quantile(p))?;
        Ok(())
    })
}
