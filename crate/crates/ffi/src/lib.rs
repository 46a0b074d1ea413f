//! C interface to the `rzoro` solver.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible function returns an
//! [`RzoroStatus`]; the message of the most recent failure on the calling
//! thread is available through [`rzoro_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rzoro::cli::solve_config;
use rzoro::config::{AlgoConfig, Algorithm, RunConfig};
use rzoro::output::{to_json, SolveResult, SolveStatus};
use rzoro::{build_problem, Error, ProblemParams, SolveReport, TubeOcp};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RzoroStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownProblem = 3,
    DimensionMismatch = 4,
    /// The outer loop hit its iteration limit; the report is still returned.
    NotConverged = 5,
    /// The backed-off problem is infeasible; the report is still returned.
    Infeasible = 6,
    Numerical = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RzoroAlgorithm {
    Nominal = 0,
    /// Constant weights and zero feedback gains.
    Zoro = 1,
    RiccatiZoroConstant = 2,
    RiccatiZoroAdaptive = 3,
    RiccatiZoroSiro = 4,
}

impl From<RzoroAlgorithm> for Algorithm {
    fn from(a: RzoroAlgorithm) -> Self {
        match a {
            RzoroAlgorithm::Nominal => Algorithm::Nominal,
            RzoroAlgorithm::Zoro => Algorithm::Zoro,
            RzoroAlgorithm::RiccatiZoroConstant => Algorithm::RiccatiZoroConstant,
            RzoroAlgorithm::RiccatiZoroAdaptive => Algorithm::RiccatiZoroAdaptive,
            RzoroAlgorithm::RiccatiZoroSiro => Algorithm::RiccatiZoroSiro,
        }
    }
}

/// A tube OCP built from the problem registry.
pub struct RzoroProblem {
    ocp: TubeOcp,
    name: String,
}

/// Outcome of a solve.
pub struct RzoroReport {
    result: SolveResult,
    report: SolveReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RzoroStatus {
    match e.root() {
        Error::UnknownProblem(_) => RzoroStatus::UnknownProblem,
        Error::DimensionMismatch { .. } => RzoroStatus::DimensionMismatch,
        Error::InvalidParameter(_) | Error::InvalidModel(_) | Error::InvalidWeights(_) | Error::InvalidStep => {
            RzoroStatus::InvalidArgument
        }
        Error::Infeasible { .. } => RzoroStatus::Infeasible,
        Error::OuterMaxIters { .. } | Error::NotConverged => RzoroStatus::NotConverged,
        _ => RzoroStatus::Numerical,
    }
}

fn fail(e: Error) -> RzoroStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn guard(f: impl FnOnce() -> RzoroStatus) -> RzoroStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".into());
            RzoroStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, RzoroStatus> {
    if s.is_null() {
        set_error("null string argument".into());
        return Err(RzoroStatus::NullPointer);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8".into());
        RzoroStatus::InvalidArgument
    })
}

macro_rules! non_null {
    ($($p:expr),+) => {
        $(if $p.is_null() {
            set_error(format!("`{}` is null", stringify!($p)));
            return RzoroStatus::NullPointer;
        })+
    };
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rzoro_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (nul-terminated,
/// truncated to `len`). Returns the full message length without the nul, or
/// 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn rzoro_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Builds a registry problem. `sigma` scales the disturbance set, `gamma` is
/// the tightening factor (1 for set-based noise) and `horizon == 0` keeps the
/// problem default.
///
/// # Safety
/// `name` must be a nul-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rzoro_problem_new(
    name: *const c_char,
    sigma: f64,
    gamma: f64,
    horizon: usize,
    out: *mut *mut RzoroProblem,
) -> RzoroStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        let name = match c_str(name) {
            Ok(n) => n,
            Err(s) => return s,
        };
        let params = ProblemParams {
            name: name.into(),
            sigma,
            gamma,
            horizon: (horizon > 0).then_some(horizon),
            ..Default::default()
        };
        match build_problem(&params) {
            Ok(ocp) => {
                *out = Box::into_raw(Box::new(RzoroProblem {
                    ocp,
                    name: name.into(),
                }));
                RzoroStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `p` must be null or a handle from [`rzoro_problem_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rzoro_problem_free(p: *mut RzoroProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Writes state dimension, control dimension and horizon.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rzoro_problem_dims(
    p: *const RzoroProblem,
    nx: *mut usize,
    nu: *mut usize,
    horizon: *mut usize,
) -> RzoroStatus {
    non_null!(p, nx, nu, horizon);
    let d = (*p).ocp.dims();
    *nx = d.nx;
    *nu = d.nu;
    *horizon = (*p).ocp.horizon();
    RzoroStatus::Ok
}

fn finish(result: SolveResult, report: SolveReport, out: *mut *mut RzoroReport) -> RzoroStatus {
    let status = match result.status {
        SolveStatus::Converged => RzoroStatus::Ok,
        SolveStatus::MaxOuterIters => {
            set_error("no fixed point within the outer iteration limit".into());
            RzoroStatus::NotConverged
        }
        SolveStatus::Infeasible => {
            set_error("the backed-off nominal problem is infeasible".into());
            RzoroStatus::Infeasible
        }
    };
    unsafe { *out = Box::into_raw(Box::new(RzoroReport { result, report })) };
    status
}

/// Solves `p` with default options for `algo`. On `Ok`, `NotConverged` and
/// `Infeasible` a report is stored in `out`.
///
/// # Safety
/// `p` must be a live problem handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rzoro_solve(
    p: *const RzoroProblem,
    algo: RzoroAlgorithm,
    out: *mut *mut RzoroReport,
) -> RzoroStatus {
    guard(|| {
        non_null!(p, out);
        *out = ptr::null_mut();
        let problem = &*p;
        let cfg = RunConfig {
            problem: ProblemParams {
                name: problem.name.clone(),
                sigma: problem.ocp.sigma(),
                gamma: problem.ocp.gamma(),
                horizon: Some(problem.ocp.horizon()),
                ..Default::default()
            },
            algo: AlgoConfig {
                kind: algo.into(),
                ..Default::default()
            },
            ..Default::default()
        };
        let ocp = if cfg.algo.kind == Algorithm::Nominal {
            match problem.ocp.clone().with_sigma(0.0) {
                Ok(o) => o,
                Err(e) => return fail(e),
            }
        } else {
            problem.ocp.clone()
        };
        let opts = match cfg.algo.options(&ocp) {
            Ok(o) => o,
            Err(e) => return fail(e),
        };
        let report = match rzoro::solve(&ocp, &opts) {
            Ok(r) => r,
            Err(Error::OuterMaxIters { report, .. }) | Err(Error::Infeasible { report, .. }) => *report,
            Err(e) => return fail(e),
        };
        finish(SolveResult::new(&cfg, &ocp, &report), report, out)
    })
}

/// Solves the problem described by a TOML run configuration (the format of
/// the `rzoro` command line tool).
///
/// # Safety
/// `config_toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rzoro_solve_config(config_toml: *const c_char, out: *mut *mut RzoroReport) -> RzoroStatus {
    guard(|| {
        non_null!(out);
        *out = ptr::null_mut();
        let text = match c_str(config_toml) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let cfg = match RunConfig::from_toml(text) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        match solve_config(&cfg) {
            Ok((ocp, report, _)) => finish(SolveResult::new(&cfg, &ocp, &report), report, out),
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `r` must be null or a handle from a solve function not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_free(r: *mut RzoroReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// # Safety
/// `r` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_objective(r: *const RzoroReport) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    (*r).report.objective
}

/// # Safety
/// `r` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_outer_iterations(r: *const RzoroReport) -> usize {
    if r.is_null() {
        return 0;
    }
    (*r).report.outer_iterations
}

/// Largest backoff over all stages and constraints.
///
/// # Safety
/// `r` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_max_backoff(r: *const RzoroReport) -> f64 {
    if r.is_null() {
        return f64::NAN;
    }
    (*r).report.backoffs.inf_norm()
}

unsafe fn copy_out(data: &[f64], buf: *mut f64, len: usize, written: *mut usize) -> RzoroStatus {
    if !written.is_null() {
        *written = data.len();
    }
    if buf.is_null() || len < data.len() {
        set_error(format!("buffer holds {len} values, {} needed", data.len()));
        return RzoroStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    RzoroStatus::Ok
}

/// Nominal states, row-major `(N + 1) x nx`. `written` receives the number
/// of values required even when `buf` is too small.
///
/// # Safety
/// `r` must be a live report; `buf` must hold `len` doubles; `written` may be null.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_states(
    r: *const RzoroReport,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> RzoroStatus {
    non_null!(r);
    copy_out(&(*r).result.x.data, buf, len, written)
}

/// Nominal controls, row-major `N x nu`.
///
/// # Safety
/// As [`rzoro_report_states`].
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_controls(
    r: *const RzoroReport,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> RzoroStatus {
    non_null!(r);
    copy_out(&(*r).result.u.data, buf, len, written)
}

/// Backoffs of stage `k` (`k == N` gives the terminal constraints).
///
/// # Safety
/// As [`rzoro_report_states`].
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_backoffs(
    r: *const RzoroReport,
    k: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> RzoroStatus {
    non_null!(r);
    let b = &(*r).result.backoffs;
    let data = if k < b.stage.len() {
        &b.stage[k]
    } else if k == b.stage.len() {
        &b.terminal
    } else {
        set_error(format!("stage {k} out of range 0..={}", b.stage.len()));
        return RzoroStatus::InvalidArgument;
    };
    copy_out(data, buf, len, written)
}

/// The full result as JSON; free with [`rzoro_string_free`]. Null on failure.
///
/// # Safety
/// `r` must be a live report handle.
#[no_mangle]
pub unsafe extern "C" fn rzoro_report_json(r: *const RzoroReport) -> *mut c_char {
    if r.is_null() {
        set_error("`r` is null".into());
        return ptr::null_mut();
    }
    CString::new(to_json(&(*r).result)).map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rzoro_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
