//! C ABI over the estimation library: load a combined CSV into an opaque
//! sample handle, run one estimator, get the report back as JSON.
//!
//! Every function returns a status code; 0 is success. On failure the
//! thread-local message from `sampfuse_last_error` describes the problem.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use sampfuse::data::{load_csv, SchemaDescriptor};
use sampfuse::estimators::{aipw_report, ipw_report, PoissonDesign};
use sampfuse::outcome::{fit_outcome, predict, OutcomeFamily};
use sampfuse::propensity::{fit_collaborative, fit_lasso, fit_newton, fit_oalasso, PenaltyConfig};
use sampfuse::sim::EstimatorKind;
use sampfuse::{CombinedSample, Error, Membership};

pub const SAMPFUSE_OK: i32 = 0;
pub const SAMPFUSE_ERR_NULL_ARG: i32 = 1;
pub const SAMPFUSE_ERR_UTF8: i32 = 2;
pub const SAMPFUSE_ERR_VALIDATION: i32 = 3;
pub const SAMPFUSE_ERR_CONVERGENCE: i32 = 4;
pub const SAMPFUSE_ERR_OTHER: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_for(err: &Error) -> i32 {
    match err {
        Error::Convergence { .. } | Error::Separation | Error::Degenerate(_) => {
            SAMPFUSE_ERR_CONVERGENCE
        }
        Error::Validation(_) | Error::Dimension(_) | Error::Parse { .. } => SAMPFUSE_ERR_VALIDATION,
        _ => SAMPFUSE_ERR_OTHER,
    }
}

/// Opaque sample handle; free with `sampfuse_sample_free`.
pub struct SampfuseSample {
    inner: CombinedSample,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error("null argument");
        return Err(SAMPFUSE_ERR_NULL_ARG);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        SAMPFUSE_ERR_UTF8
    })
}

/// Last error message for this thread; valid until the next failing call.
#[no_mangle]
pub extern "C" fn sampfuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a combined CSV (both samples in one file) using an inline schema
/// descriptor of the form `covariates=x1,x2;delta=delta;in_b=in_b;...`.
///
/// # Safety
/// `path` and `schema` must be valid NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_sample_load_csv(
    path: *const c_char,
    schema: *const c_char,
    out: *mut *mut SampfuseSample,
) -> i32 {
    if out.is_null() {
        set_error("null output pointer");
        return SAMPFUSE_ERR_NULL_ARG;
    }
    *out = ptr::null_mut();
    let path = match cstr_arg(path) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let schema = match cstr_arg(schema) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let parsed = match SchemaDescriptor::parse(schema) {
        Ok(s) => s,
        Err(e) => {
            set_error(&e.to_string());
            return code_for(&e);
        }
    };
    match load_csv(Path::new(path), &parsed) {
        Ok(sample) => {
            *out = Box::into_raw(Box::new(SampfuseSample { inner: sample }));
            SAMPFUSE_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_for(&e)
        }
    }
}

/// Number of non-probability (A) units in the sample.
///
/// # Safety
/// `sample` must come from `sampfuse_sample_load_csv` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_sample_n_a(sample: *const SampfuseSample) -> i64 {
    if sample.is_null() {
        return -1;
    }
    (*sample).inner.n_a() as i64
}

/// Number of probability (B) units in the sample.
///
/// # Safety
/// `sample` must come from `sampfuse_sample_load_csv` and not be freed.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_sample_n_b(sample: *const SampfuseSample) -> i64 {
    if sample.is_null() {
        return -1;
    }
    (*sample).inner.n_b() as i64
}

fn run_estimator(sample: &CombinedSample, method: &str, seed: u64) -> sampfuse::Result<String> {
    let kind = EstimatorKind::parse(method)?;
    let design = PoissonDesign;
    let penalty = PenaltyConfig {
        seed,
        ..PenaltyConfig::default()
    };
    let all: Vec<usize> = (0..sample.p()).collect();
    let report = match kind {
        EstimatorKind::IpwLogistic => {
            ipw_report(sample, &fit_newton(sample, &all)?, kind.name(), &design)?
        }
        EstimatorKind::IpwLasso => {
            ipw_report(sample, &fit_lasso(sample, &penalty)?, kind.name(), &design)?
        }
        EstimatorKind::IpwOalasso => ipw_report(
            sample,
            &fit_oalasso(sample, &penalty, OutcomeFamily::Linear)?,
            kind.name(),
            &design,
        )?,
        _ => {
            let of = fit_outcome(sample, OutcomeFamily::Linear, &all)?;
            let ma = predict(&of, sample, Membership::A)?;
            let mb = predict(&of, sample, Membership::B)?;
            let pfit = match kind {
                EstimatorKind::AipwLasso => fit_lasso(sample, &penalty)?,
                EstimatorKind::AipwOalasso => fit_oalasso(sample, &penalty, OutcomeFamily::Linear)?,
                EstimatorKind::AipwBenkeser => fit_collaborative(sample, &ma, &mb)?,
                _ => fit_newton(sample, &all)?,
            };
            aipw_report(sample, &pfit, &ma, &mb, kind.name(), of.kind, &design)?
        }
    };
    serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))
}

/// Run one estimator by name (e.g. "ipw-logistic", "aipw-oalasso") and return
/// the full report as a JSON string. Free the string with
/// `sampfuse_string_free`.
///
/// # Safety
/// `sample` must be a live handle; `method` a valid NUL-terminated string;
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_estimate_json(
    sample: *const SampfuseSample,
    method: *const c_char,
    seed: u64,
    out_json: *mut *mut c_char,
) -> i32 {
    if sample.is_null() || out_json.is_null() {
        set_error("null argument");
        return SAMPFUSE_ERR_NULL_ARG;
    }
    *out_json = ptr::null_mut();
    let method = match cstr_arg(method) {
        Ok(s) => s,
        Err(c) => return c,
    };
    match run_estimator(&(*sample).inner, method, seed) {
        Ok(json) => {
            let c = CString::new(json).unwrap_or_default();
            *out_json = c.into_raw();
            SAMPFUSE_OK
        }
        Err(e) => {
            set_error(&e.to_string());
            code_for(&e)
        }
    }
}

/// Free a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed already.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Free a sample handle. Null is a no-op.
///
/// # Safety
/// `sample` must have come from `sampfuse_sample_load_csv` and not be freed
/// already.
#[no_mangle]
pub unsafe extern "C" fn sampfuse_sample_free(sample: *mut SampfuseSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}
