use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use composite_ate_ffi::*;

fn four_rows() -> *mut CaDataset {
    let z = [1.0, 1.0, 0.0, 0.0];
    let y = [2.0, 4.0, 1.0, 3.0];
    let mut d = ptr::null_mut();
    let st = unsafe { ca_dataset_new(4, 1, z.as_ptr(), y.as_ptr(), 0, ptr::null(), ptr::null(), ptr::null(), &mut d) };
    assert_eq!(st, CaStatus::Ok);
    assert!(!d.is_null());
    d
}

fn last_error() -> String {
    let p = ca_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn four_row_cre_through_handles() {
    let d = four_rows();
    let mut e = ptr::null_mut();
    unsafe {
        assert_eq!(ca_estimate(d, CaDesign::Cre, CaEstimator::Standard, 0, 0.0, &mut e), CaStatus::Ok);
        let mut tau_c = f64::NAN;
        assert_eq!(ca_estimate_tau_c(e, &mut tau_c), CaStatus::Ok);
        assert!((tau_c - 0.2).abs() < 1e-12);
        assert_eq!(ca_estimate_outcomes(e), 1);
        let mut beta = [0.0; 1];
        assert_eq!(ca_estimate_beta(e, beta.as_mut_ptr(), 1), CaStatus::Ok);
        assert!((beta[0] - 0.2).abs() < 1e-12);
        let mut w = CaWald::default();
        assert_eq!(ca_estimate_wald(e, &mut w), CaStatus::Ok);
        assert_eq!(w.df, 1);
        assert!(w.p_value > 0.0 && w.p_value < 1.0);
        let mut ci = CaInterval::default();
        assert_eq!(ca_estimate_interval(e, CaCiMethod::Normal, 0.05, -1.0, &mut ci), CaStatus::Ok);
        assert!(ci.lower < tau_c && tau_c < ci.upper);
        ca_estimate_free(e);
        ca_dataset_free(d);
    }
}

#[test]
fn short_buffer_is_rejected() {
    let d = four_rows();
    let mut e = ptr::null_mut();
    unsafe {
        assert_eq!(ca_estimate(d, CaDesign::Cre, CaEstimator::Standard, 0, 0.0, &mut e), CaStatus::Ok);
        assert_eq!(ca_estimate_beta(e, [0.0f64; 0].as_mut_ptr(), 0), CaStatus::Validation);
        ca_estimate_free(e);
        ca_dataset_free(d);
    }
}

#[test]
fn validation_and_null_errors_are_reported() {
    let z = [1.0, 2.0, 0.0, 0.0];
    let y = [2.0, 4.0, 1.0, 3.0];
    let mut d = ptr::null_mut();
    let st = unsafe { ca_dataset_new(4, 1, z.as_ptr(), y.as_ptr(), 0, ptr::null(), ptr::null(), ptr::null(), &mut d) };
    assert_eq!(st, CaStatus::Validation);
    assert!(d.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { ca_estimate(ptr::null(), CaDesign::Cre, CaEstimator::Standard, 0, 0.0, &mut ptr::null_mut()) };
    assert_eq!(st, CaStatus::NullPointer);
    assert!(last_error().contains("data"));
}

#[test]
fn sre_without_strata_is_one_stratum() {
    let d = four_rows();
    let mut e = ptr::null_mut();
    let mut tau_c = f64::NAN;
    unsafe {
        assert_eq!(ca_estimate(d, CaDesign::SreReg, CaEstimator::Standard, 0, 0.0, &mut e), CaStatus::Ok);
        assert_eq!(ca_estimate_tau_c(e, &mut tau_c), CaStatus::Ok);
        ca_estimate_free(e);
        ca_dataset_free(d);
    }
    assert!((tau_c - 0.2).abs() < 1e-12);
}

#[test]
fn inverse_logistic_has_no_interval() {
    let d = four_rows();
    let mut e = ptr::null_mut();
    let mut ci = CaInterval::default();
    unsafe {
        assert_eq!(ca_estimate(d, CaDesign::Cre, CaEstimator::InverseLogistic, 0, 0.0, &mut e), CaStatus::Ok);
        assert_eq!(ca_estimate_interval(e, CaCiMethod::Auto, 0.05, -1.0, &mut ci), CaStatus::Validation);
        ca_estimate_free(e);
        ca_dataset_free(d);
    }
    assert!(last_error().contains("tau = 0"));
}

#[test]
fn stratified_handle_matches_pooled_example() {
    // Two copies of the four-row example give the same composite.
    let z = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let y = [2.0, 4.0, 1.0, 3.0, 2.0, 4.0, 1.0, 3.0];
    let s = [7i64, 7, 7, 7, 9, 9, 9, 9];
    let mut d = ptr::null_mut();
    let mut e = ptr::null_mut();
    let mut tau_c = f64::NAN;
    unsafe {
        let st = ca_dataset_new(8, 1, z.as_ptr(), y.as_ptr(), 0, ptr::null(), s.as_ptr(), ptr::null(), &mut d);
        assert_eq!(st, CaStatus::Ok);
        assert_eq!(ca_estimate(d, CaDesign::SreReg, CaEstimator::Standard, 0, 0.0, &mut e), CaStatus::Ok);
        assert_eq!(ca_estimate_tau_c(e, &mut tau_c), CaStatus::Ok);
        ca_estimate_free(e);
        ca_dataset_free(d);
    }
    assert!((tau_c - 0.2).abs() < 1e-12);
}

#[test]
fn wchi2_reproduces_chi2_one() {
    let lambdas = [1.0];
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(ca_wchi2_cdf(lambdas.as_ptr(), 1, 3.841458820694124, &mut v), CaStatus::Ok);
        assert!((v - 0.95).abs() < 1e-6);
        assert_eq!(ca_wchi2_quantile(lambdas.as_ptr(), 1, 0.95, &mut v), CaStatus::Ok);
        assert!((v - 3.841458820694124).abs() < 1e-5);
        assert_eq!(ca_wchi2_cdf(ptr::null(), 1, 1.0, &mut v), CaStatus::NullPointer);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        ca_dataset_free(ptr::null_mut());
        ca_estimate_free(ptr::null_mut());
    }
    assert_eq!(ca_abi_version(), CA_ABI_VERSION);
}

#[test]
fn header_compiles_as_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include").join("composite_ate.h");
    assert!(header.exists(), "header not generated");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ca_dataset_new", "ca_estimate_interval", "ca_wchi2_quantile", "ca_last_error_message"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(out) =
        Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"]).arg(&header).output()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_and_runs() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // `cargo test` builds only the rlib; build the static library with the
    // same profile so it lands next to this test's deps directory.
    let built = Command::new(env!("CARGO"))
        .args(["build", "--quiet", "-p", "composite-ate-ffi", "--lib", "--profile", "test"])
        .current_dir(&root)
        .status()
        .is_ok_and(|s| s.success());
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().and_then(|p| p.parent()).unwrap().join("libcomposite_ate_ffi.a");
    if !built || !lib.exists() {
        eprintln!("static library not available; link check skipped");
        return;
    }
    let dir = tempfile_dir();
    let bin = dir.join("four_rows");
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(root.join("include"))
        .arg(root.join("tests").join("c").join("four_rows.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
    else {
        eprintln!("no C compiler; link check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    let vals: Vec<f64> =
        String::from_utf8(run.stdout).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert!((vals[0] - 0.2).abs() < 1e-12);
    // Two-step interval in the chi-squared regime, as in the CLI golden report.
    assert!((vals[1] + 0.249174348411).abs() < 1e-11);
    assert!((vals[2] - 0.199982327096).abs() < 1e-11);
}

fn tempfile_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("composite-ate-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
