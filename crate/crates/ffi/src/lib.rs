//! C interface to `longicausal`.
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`lc_estimate`
//! style functions and released with the matching `*_free`. Every fallible
//! call returns an [`LcStatus`]; on failure the message is available from
//! [`lc_last_error`] on the same thread until the next failing call.
//! Strings returned through `char **` out-parameters are owned by the caller
//! and released with [`lc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use longicausal::cli::{load_dataset, with_pool};
use longicausal::config::RunConfig;
use longicausal::dataset::LongitudinalDataset;
use longicausal::mase::{run_mase, MaseResult};
use longicausal::simulation::run_monte_carlo;
use longicausal::Error;
use nalgebra::DMatrix;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Config = 6,
    Numerical = 7,
    Panic = 8,
}

impl LcStatus {
    fn of(e: &Error) -> Self {
        match e {
            Error::Io { .. } => LcStatus::Io,
            Error::Csv(_) | Error::Json(_) | Error::Schema(_) => LcStatus::Parse,
            Error::Validation(_) | Error::Dimension(_) => LcStatus::Validation,
            Error::Config(_) | Error::InvalidSpec(_) => LcStatus::Config,
            Error::Numerical(_)
            | Error::Singular(_)
            | Error::NonConvergence { .. }
            | Error::Positivity(_) => LcStatus::Numerical,
        }
    }
}

/// A validated longitudinal dataset.
pub struct LcDataset(LongitudinalDataset);

/// Run configuration; see the JSON configuration documentation.
pub struct LcConfig(RunConfig);

/// A fitted MASE estimate for one outcome.
pub struct LcResult(MaseResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(LcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(LcStatus::of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(LcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(LcStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            LcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn string_out(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| invalid("output contains a NUL byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Last error message on this thread, or an empty string. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a wide CSV. `schema_path` may be NULL, in which case column roles
/// are inferred from the `A_t`, `Z_t_k`, `Y_t_j`, `B_k` naming convention.
///
/// # Safety
/// `path` and a non-NULL `schema_path` must be NUL-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_load_csv(
    path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut LcDataset,
) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = RunConfig {
            dataset: Some(PathBuf::from(str_arg(path, "path")?)),
            ..RunConfig::default()
        };
        if !schema_path.is_null() {
            cfg.schema = Some(PathBuf::from(str_arg(schema_path, "schema_path")?));
        }
        put(out, LcDataset(load_dataset(&cfg)?));
        Ok(())
    })
}

/// Builds a dataset with `p` covariates and one outcome per timepoint from
/// subject-major arrays: `exposures[i*T + t]` (0 or 1),
/// `covariates[(i*T + t)*p + k]` and `outcomes[i*T + t]`.
///
/// # Safety
/// The arrays must hold `n*T`, `n*T*p` and `n*T` elements respectively;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_from_arrays(
    n: usize,
    n_timepoints: usize,
    p: usize,
    exposures: *const u8,
    covariates: *const f64,
    outcomes: *const f64,
    out: *mut *mut LcDataset,
) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 || n_timepoints == 0 {
            return Err(invalid("n and n_timepoints must be positive"));
        }
        if exposures.is_null() || outcomes.is_null() || (p > 0 && covariates.is_null()) {
            return Err(null("input array"));
        }
        let nt = n.checked_mul(n_timepoints).ok_or_else(|| invalid("n * T overflows"))?;
        let ntp = nt.checked_mul(p).ok_or_else(|| invalid("n * T * p overflows"))?;
        let a = std::slice::from_raw_parts(exposures, nt);
        let y = std::slice::from_raw_parts(outcomes, nt);
        let z: &[f64] = if p == 0 { &[] } else { std::slice::from_raw_parts(covariates, ntp) };
        let exp = (0..n_timepoints)
            .map(|t| (0..n).map(|i| a[i * n_timepoints + t]).collect())
            .collect();
        let cov = (0..n_timepoints)
            .map(|t| DMatrix::from_fn(n, p, |i, k| z[(i * n_timepoints + t) * p + k]))
            .collect();
        let out_y = (0..n_timepoints)
            .map(|t| DMatrix::from_fn(n, 1, |i, _| y[i * n_timepoints + t]))
            .collect();
        put(out, LcDataset(LongitudinalDataset::new(exp, cov, out_y, None)?));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_n_subjects(ds: *const LcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_subjects())
}

/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_n_timepoints(ds: *const LcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_timepoints())
}

/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_n_outcomes(ds: *const LcDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.n_outcomes())
}

/// # Safety
/// `ds` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_dataset_free(ds: *mut LcDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_new(out: *mut *mut LcConfig) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, LcConfig(RunConfig::default()));
        Ok(())
    })
}

/// Parses and validates a JSON configuration. Unknown keys are rejected.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_from_json(json: *const c_char, out: *mut *mut LcConfig) -> LcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_json_str(str_arg(json, "json")?)?;
        cfg.validate()?;
        put(out, LcConfig(cfg));
        Ok(())
    })
}

unsafe fn with_config(cfg: *mut LcConfig, f: impl FnOnce(&mut RunConfig)) -> LcStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| null("config"))?;
        let mut next = c.0.clone();
        f(&mut next);
        next.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_config_set_seed(cfg: *mut LcConfig, seed: u64) -> LcStatus {
    with_config(cfg, |c| c.seed = Some(seed))
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_config_set_alpha(cfg: *mut LcConfig, alpha: f64) -> LcStatus {
    with_config(cfg, |c| c.mase.alpha = alpha)
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_config_set_trim(cfg: *mut LcConfig, lo: f64, hi: f64) -> LcStatus {
    with_config(cfg, |c| c.mase.nuisance.trim = (lo, hi))
}

/// Worker threads; 0 restores the default (environment, then all cores).
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_config_set_workers(cfg: *mut LcConfig, workers: usize) -> LcStatus {
    with_config(cfg, |c| c.workers = (workers > 0).then_some(workers))
}

/// Resolved configuration as JSON.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_to_json(cfg: *const LcConfig, out: *mut *mut c_char) -> LcStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        string_out(out, serde_json::to_string_pretty(&c.0).map_err(Error::from)?)
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_config_free(cfg: *mut LcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs MASE on outcome `outcome` (1-based).
///
/// # Safety
/// `ds` and `cfg` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_estimate(
    ds: *const LcDataset,
    cfg: *const LcConfig,
    outcome: usize,
    out: *mut *mut LcResult,
) -> LcStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if outcome == 0 || outcome > d.0.n_outcomes() {
            return Err(invalid(format!(
                "outcome {outcome} out of range 1..={}",
                d.0.n_outcomes()
            )));
        }
        let mase = c.0.resolved_mase();
        let r = with_pool(&c.0, || run_mase(&d.0, outcome, &mase))?;
        put(out, LcResult(r));
        Ok(())
    })
}

/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_result_ate(r: *const LcResult) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.0.estimate.ate)
}

/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_result_se(r: *const LcResult) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.0.sandwich.se_ate)
}

/// # Safety
/// `r` must be a live handle; `lo` and `hi` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_result_ci(r: *const LcResult, lo: *mut f64, hi: *mut f64) -> LcStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        if lo.is_null() || hi.is_null() {
            return Err(null("lo/hi"));
        }
        (*lo, *hi) = r.0.sandwich.ci;
        Ok(())
    })
}

/// Copies up to `len` MSM coefficients into `buf` and returns how many
/// exist (T + 1). Pass `buf = NULL` to query the count.
///
/// # Safety
/// `r` must be a live handle; a non-NULL `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lc_result_theta(r: *const LcResult, buf: *mut f64, len: usize) -> usize {
    let Some(r) = r.as_ref() else { return 0 };
    let theta = &r.0.estimate.theta;
    if !buf.is_null() {
        ptr::copy_nonoverlapping(theta.as_ptr(), buf, theta.len().min(len));
    }
    theta.len()
}

/// 1 when no invariant flag was raised, 0 otherwise (or for NULL).
///
/// # Safety
/// `r` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn lc_result_flags_clean(r: *const LcResult) -> i32 {
    r.as_ref().map_or(0, |r| r.0.flags.clean() as i32)
}

/// Full result, including solver diagnostics and propensity summaries, as
/// JSON.
///
/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_result_to_json(r: *const LcResult, out: *mut *mut c_char) -> LcStatus {
    guard(|| {
        let r = r.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        string_out(out, serde_json::to_string_pretty(&r.0).map_err(Error::from)?)
    })
}

/// # Safety
/// `r` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_result_free(r: *mut LcResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Runs the configured Monte Carlo study and returns its summary table as
/// CSV.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_simulate_csv(cfg: *const LcConfig, out: *mut *mut c_char) -> LcStatus {
    guard(|| {
        let c = cfg.as_ref().ok_or_else(|| null("config"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let report = run_monte_carlo(
            &c.0.simulation.spec,
            &c.0.methods,
            c.0.simulation.replications,
            c.0.base_seed(),
            c.0.effective_workers()?,
            &c.0.monte_carlo(),
        )?;
        string_out(out, report.to_csv())
    })
}
