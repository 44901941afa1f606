//! C ABI for `matprod`.
//!
//! Every entry point returns a [`MatprodStatus`]. On failure the message is
//! available from [`matprod_last_error`] on the same thread. Configurations
//! and results cross the boundary as UTF-8 JSON in the formats used by the
//! `matprod` command line tool.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use matprod::config::{parse, BoundConfig, CompareConfig, SimulateConfig};
use matprod::matrix::DenseMatrix;
use matprod::rng::DEFAULT_SEED;
use matprod::run::{run_bounds, run_compare, run_simulate, spec_from_json};
use matprod::scenarios::{ScenarioReport, SCENARIOS};
use matprod::schatten::{lp_norm_of, singular_values, SchattenOrder};
use matprod::simulate::{simulate_product, ProductSpec};
use matprod::verify::default_suite;
use matprod::Error;
use serde::Serialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatprodStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    InvalidParameter = 4,
    ConditionViolated = 5,
    Unsupported = 6,
    EnumerationInfeasible = 7,
    NothingToCheck = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Outcome carried by a result handle, matching the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatprodOutcome {
    Passed = 0,
    ConditionFailed = 2,
    VerificationFailed = 3,
}

/// A product specification built from JSON.
pub struct MatprodSpec {
    inner: ProductSpec,
}

/// JSON output of a run together with its outcome.
pub struct MatprodResult {
    json: CString,
    outcome: MatprodOutcome,
}

struct Failure {
    status: MatprodStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidInput(_) | Error::Json(_) | Error::Csv(_) | Error::InvalidConstruction(_) => {
                MatprodStatus::InvalidInput
            }
            Error::InvalidParameter(_) => MatprodStatus::InvalidParameter,
            Error::ConditionViolated(_) => MatprodStatus::ConditionViolated,
            Error::UnsupportedEnsemble(_) | Error::Unsupported(_) | Error::MissingUniformBounds => {
                MatprodStatus::Unsupported
            }
            Error::EnumerationInfeasible { .. } => MatprodStatus::EnumerationInfeasible,
            Error::NothingToCheck(_) => MatprodStatus::NothingToCheck,
            Error::Io(_) => MatprodStatus::Io,
        };
        Failure { status, message: e.to_string() }
    }
}

fn failure(status: MatprodStatus, message: impl Into<String>) -> Failure {
    Failure { status, message: message.into() }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MatprodStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MatprodStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.message);
            e.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            MatprodStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(failure(MatprodStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| failure(MatprodStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_opt<T: Copy>(p: *const T) -> Option<T> {
    if p.is_null() {
        None
    } else {
        Some(*p)
    }
}

fn check_out<T>(out: *mut T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        Err(failure(MatprodStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn trials_arg(trials: Option<u64>) -> Result<Option<usize>, Failure> {
    trials
        .map(|t| usize::try_from(t).map_err(|_| failure(MatprodStatus::InvalidParameter, "trial count too large")))
        .transpose()
}

fn make_result<T: Serialize>(value: &T, outcome: MatprodOutcome, out: *mut *mut MatprodResult) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    let json = CString::new(json).map_err(|_| failure(MatprodStatus::InvalidInput, "output contains a nul byte"))?;
    unsafe { *out = Box::into_raw(Box::new(MatprodResult { json, outcome })) };
    Ok(())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn matprod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failed call on this thread, or null if no call
/// has failed. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn matprod_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a product specification from JSON.
///
/// # Safety
/// `json` must be a nul-terminated string and `out` a valid pointer. The
/// handle written to `out` must be released with [`matprod_spec_free`].
#[no_mangle]
pub unsafe extern "C" fn matprod_spec_from_json(json: *const c_char, out: *mut *mut MatprodSpec) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        let text = read_str(json, "json")?;
        let inner = spec_from_json(text)?;
        *out = Box::into_raw(Box::new(MatprodSpec { inner }));
        Ok(())
    })
}

/// # Safety
/// `spec` must be null or a handle from [`matprod_spec_from_json`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn matprod_spec_free(spec: *mut MatprodSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Writes the row count of the product and the number of factors.
///
/// # Safety
/// `spec` must be a live handle; `dim` and `factors` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn matprod_spec_shape(
    spec: *const MatprodSpec,
    dim: *mut usize,
    factors: *mut usize,
) -> MatprodStatus {
    guard(|| {
        check_out(dim, "dim")?;
        check_out(factors, "factors")?;
        let s = spec.as_ref().ok_or_else(|| failure(MatprodStatus::NullPointer, "spec is null"))?;
        *dim = s.inner.dim();
        *factors = s.inner.factors().len();
        Ok(())
    })
}

/// Samples `trials` products and writes the Schatten `p` norm of each into
/// `norms`; `p` may be `INFINITY`. Trials excluded as numerically singular
/// are skipped, and `written` receives the number of values stored.
///
/// # Safety
/// `spec` must be a live handle, `norms` must point to `capacity` doubles,
/// and `written` must be valid.
#[no_mangle]
pub unsafe extern "C" fn matprod_spec_sample_norms(
    spec: *const MatprodSpec,
    trials: usize,
    seed: u64,
    p: f64,
    norms: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> MatprodStatus {
    guard(|| {
        check_out(written, "written")?;
        check_out(norms, "norms")?;
        let s = spec.as_ref().ok_or_else(|| failure(MatprodStatus::NullPointer, "spec is null"))?;
        if capacity < trials {
            return Err(failure(
                MatprodStatus::BufferTooSmall,
                format!("need room for {trials} values, got {capacity}"),
            ));
        }
        let order = SchattenOrder::from(p).validate()?;
        let run = simulate_product(&s.inner, trials, seed)?;
        let out = std::slice::from_raw_parts_mut(norms, capacity);
        for (slot, t) in out.iter_mut().zip(&run.trials) {
            *slot = lp_norm_of(&singular_values(&t.value)?, order)?;
        }
        *written = run.trials.len();
        Ok(())
    })
}

/// Schatten `p` norm of a row-major `rows × cols` matrix; `p` may be `INFINITY`.
///
/// # Safety
/// `data` must point to `rows * cols` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn matprod_schatten_norm(
    data: *const f64,
    rows: usize,
    cols: usize,
    p: f64,
    out: *mut f64,
) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        if data.is_null() {
            return Err(failure(MatprodStatus::NullPointer, "data is null"));
        }
        let len =
            rows.checked_mul(cols).ok_or_else(|| failure(MatprodStatus::InvalidParameter, "matrix size overflows"))?;
        let m = DenseMatrix::new(rows, cols, std::slice::from_raw_parts(data, len).to_vec())?;
        let order = SchattenOrder::from(p).validate()?;
        *out = lp_norm_of(&singular_values(&m)?, order)?;
        Ok(())
    })
}

/// Evaluates the bounds of a `bound` configuration.
///
/// # Safety
/// `config` must be a nul-terminated string, `seed` null or valid, and `out`
/// valid. Release the result with [`matprod_result_free`].
#[no_mangle]
pub unsafe extern "C" fn matprod_bound(
    config: *const c_char,
    seed: *const u64,
    out: *mut *mut MatprodResult,
) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg: BoundConfig = parse(read_str(config, "config")?)?;
        let r = run_bounds(&cfg, read_opt(seed))?;
        let outcome = if r.any_condition_violated() { MatprodOutcome::ConditionFailed } else { MatprodOutcome::Passed };
        make_result(&r, outcome, out)
    })
}

/// Runs a `simulate` configuration. Null `trials` or `seed` keep the
/// configured values; a trial count of zero requests exact enumeration.
///
/// # Safety
/// As for [`matprod_bound`]; `trials` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn matprod_simulate(
    config: *const c_char,
    trials: *const u64,
    seed: *const u64,
    out: *mut *mut MatprodResult,
) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg: SimulateConfig = parse(read_str(config, "config")?)?;
        let r = run_simulate(&cfg, trials_arg(read_opt(trials))?, read_opt(seed))?;
        make_result(&r, MatprodOutcome::Passed, out)
    })
}

/// Checks the bounds of a `compare` configuration against exact or Monte
/// Carlo values.
///
/// # Safety
/// As for [`matprod_simulate`].
#[no_mangle]
pub unsafe extern "C" fn matprod_compare(
    config: *const c_char,
    trials: *const u64,
    seed: *const u64,
    out: *mut *mut MatprodResult,
) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg: CompareConfig = parse(read_str(config, "config")?)?;
        let r = run_compare(&cfg, trials_arg(read_opt(trials))?, read_opt(seed))?;
        let outcome = if r.report.violations > 0 {
            MatprodOutcome::VerificationFailed
        } else if r.report.rows.iter().any(|row| !row.conditions_hold) {
            MatprodOutcome::ConditionFailed
        } else {
            MatprodOutcome::Passed
        };
        make_result(&r, outcome, out)
    })
}

#[derive(Serialize)]
struct VerifyOutput {
    checks: Vec<matprod::verify::CheckReport>,
    scenarios: Vec<ScenarioReport>,
}

/// Runs the inequality checks and, if `scenarios` is set, the end-to-end
/// scenarios.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn matprod_verify(
    trials: u64,
    seed: u64,
    scenarios: bool,
    out: *mut *mut MatprodResult,
) -> MatprodStatus {
    guard(|| {
        check_out(out, "out")?;
        let trials = trials_arg(Some(trials))?.unwrap_or_default();
        let checks = default_suite(trials, seed)?;
        let scenarios: Vec<ScenarioReport> =
            if scenarios { SCENARIOS.iter().map(|(_, f)| f(seed)).collect::<matprod::Result<_>>()? } else { vec![] };
        let failed = checks.iter().any(|r| r.deterministic && !r.passed) || scenarios.iter().any(|s| !s.passed);
        let outcome = if failed { MatprodOutcome::VerificationFailed } else { MatprodOutcome::Passed };
        make_result(&VerifyOutput { checks, scenarios }, outcome, out)
    })
}

/// Default seed used when none is given.
#[no_mangle]
pub extern "C" fn matprod_default_seed() -> u64 {
    DEFAULT_SEED
}

/// JSON text of a result, valid until the result is freed.
///
/// # Safety
/// `result` must be null or a live result handle.
#[no_mangle]
pub unsafe extern "C" fn matprod_result_json(result: *const MatprodResult) -> *const c_char {
    result.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// # Safety
/// `result` must be a live result handle.
#[no_mangle]
pub unsafe extern "C" fn matprod_result_outcome(result: *const MatprodResult) -> MatprodOutcome {
    result.as_ref().map_or(MatprodOutcome::VerificationFailed, |r| r.outcome)
}

/// # Safety
/// `result` must be null or a live result handle.
#[no_mangle]
pub unsafe extern "C" fn matprod_result_free(result: *mut MatprodResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
