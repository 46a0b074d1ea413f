use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rzoro_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { rzoro_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn problem(name: &str, sigma: f64) -> *mut RzoroProblem {
    let name = CString::new(name).unwrap();
    let mut p = ptr::null_mut();
    let s = unsafe { rzoro_problem_new(name.as_ptr(), sigma, 1.0, 0, &mut p) };
    assert_eq!(s, RzoroStatus::Ok);
    assert!(!p.is_null());
    p
}

#[test]
fn solve_and_read_back() {
    let p = problem("double_integrator", 0.1);
    let (mut nx, mut nu, mut n) = (0, 0, 0);
    assert_eq!(unsafe { rzoro_problem_dims(p, &mut nx, &mut nu, &mut n) }, RzoroStatus::Ok);
    assert_eq!((nx, nu), (2, 1));

    let mut r = ptr::null_mut();
    assert_eq!(unsafe { rzoro_solve(p, RzoroAlgorithm::RiccatiZoroConstant, &mut r) }, RzoroStatus::Ok);
    assert!(unsafe { rzoro_report_outer_iterations(r) } >= 1);
    assert!(unsafe { rzoro_report_objective(r) }.is_finite());
    assert!(unsafe { rzoro_report_max_backoff(r) } > 0.0);

    let mut needed = 0;
    let s = unsafe { rzoro_report_states(r, ptr::null_mut(), 0, &mut needed) };
    assert_eq!(s, RzoroStatus::BufferTooSmall);
    assert_eq!(needed, (n + 1) * nx);
    let mut xs = vec![f64::NAN; needed];
    assert_eq!(unsafe { rzoro_report_states(r, xs.as_mut_ptr(), xs.len(), &mut needed) }, RzoroStatus::Ok);
    assert!(xs.iter().all(|v| v.is_finite()));
    let mut us = vec![f64::NAN; n * nu];
    assert_eq!(unsafe { rzoro_report_controls(r, us.as_mut_ptr(), us.len(), ptr::null_mut()) }, RzoroStatus::Ok);

    let mut b = [0.0; 16];
    let mut m = 0;
    assert_eq!(unsafe { rzoro_report_backoffs(r, 1, b.as_mut_ptr(), b.len(), &mut m) }, RzoroStatus::Ok);
    assert!(m > 0 && b[..m].iter().all(|v| *v >= 0.0));
    assert_eq!(unsafe { rzoro_report_backoffs(r, n + 1, b.as_mut_ptr(), b.len(), &mut m) }, RzoroStatus::InvalidArgument);

    let json = unsafe { rzoro_report_json(r) };
    assert!(!json.is_null());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    assert!(text.contains("\"status\""));
    unsafe {
        rzoro_string_free(json);
        rzoro_report_free(r);
        rzoro_problem_free(p);
    }
}

#[test]
fn nominal_has_no_backoffs() {
    let p = problem("double_integrator", 0.1);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { rzoro_solve(p, RzoroAlgorithm::Nominal, &mut r) }, RzoroStatus::Ok);
    assert_eq!(unsafe { rzoro_report_max_backoff(r) }, 0.0);
    unsafe {
        rzoro_report_free(r);
        rzoro_problem_free(p);
    }
}

#[test]
fn errors_are_reported() {
    let name = CString::new("no_such_problem").unwrap();
    let mut p = ptr::null_mut();
    let s = unsafe { rzoro_problem_new(name.as_ptr(), 0.1, 1.0, 0, &mut p) };
    assert_eq!(s, RzoroStatus::UnknownProblem);
    assert!(p.is_null());
    assert!(last_error().contains("no_such_problem"));

    let s = unsafe { rzoro_problem_new(ptr::null(), 0.1, 1.0, 0, &mut p) };
    assert_eq!(s, RzoroStatus::NullPointer);
    let s = unsafe { rzoro_problem_new(name.as_ptr(), 0.1, 1.0, 0, ptr::null_mut()) };
    assert_eq!(s, RzoroStatus::NullPointer);

    let bad = CString::new("[algo]\nbogus_key = 1\n").unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { rzoro_solve_config(bad.as_ptr(), &mut r) }, RzoroStatus::InvalidArgument);
    assert!(r.is_null());
    assert!(last_error().contains("bogus_key"));

    let mut short = [0 as c_char; 4];
    let n = unsafe { rzoro_last_error(short.as_mut_ptr(), short.len()) };
    assert!(n > 3);
    assert_eq!(short[3], 0);

    unsafe {
        rzoro_problem_free(ptr::null_mut());
        rzoro_report_free(ptr::null_mut());
        rzoro_string_free(ptr::null_mut());
    }
    assert!(unsafe { rzoro_report_objective(ptr::null()) }.is_nan());
}

#[test]
fn config_solve_matches_handle_solve() {
    let cfg = CString::new("[problem]\nname = \"double_integrator\"\nsigma = 0.1\n[algo]\nkind = \"riccati_zoro_constant\"\n").unwrap();
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { rzoro_solve_config(cfg.as_ptr(), &mut a) }, RzoroStatus::Ok);
    let p = problem("double_integrator", 0.1);
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { rzoro_solve(p, RzoroAlgorithm::RiccatiZoroConstant, &mut b) }, RzoroStatus::Ok);
    assert_eq!(unsafe { rzoro_report_objective(a) }, unsafe { rzoro_report_objective(b) });
    unsafe {
        rzoro_report_free(a);
        rzoro_report_free(b);
        rzoro_problem_free(p);
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(rzoro_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "rzoro.h"

int main(void) {
    RzoroProblem *p = NULL;
    if (rzoro_problem_new("double_integrator", 0.1, 1.0, 0, &p) != RZORO_STATUS_OK) return 2;
    RzoroReport *r = NULL;
    RzoroStatus s = rzoro_solve(p, RZORO_ALGORITHM_RICCATI_ZORO_ADAPTIVE, &r);
    if (s != RZORO_STATUS_OK) return 3;
    printf("%zu %.6f\n", rzoro_report_outer_iterations(r), rzoro_report_max_backoff(r));
    rzoro_report_free(r);
    rzoro_problem_free(p);
    if (rzoro_problem_new("nope", 0.1, 1.0, 0, &p) != RZORO_STATUS_UNKNOWN_PROBLEM) return 4;
    char msg[256];
    if (rzoro_last_error(msg, sizeof msg) == 0) return 5;
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("rzoro.h").exists());
    let exe = Path::new(env!("CARGO_TARGET_TMPDIR")).join("rzoro_c_smoke");
    let test_bin = std::env::current_exe().unwrap();
    let lib = test_bin.parent().unwrap().parent().unwrap().join("librzoro_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let src = exe.with_extension("c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    let line = String::from_utf8(out.stdout).unwrap();
    let mut parts = line.split_whitespace();
    assert!(parts.next().unwrap().parse::<usize>().unwrap() >= 1);
    assert!(parts.next().unwrap().parse::<f64>().unwrap() > 0.0);
}
