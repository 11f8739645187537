//! C ABI over the drift-forge engine.
//!
//! Three surfaces are exposed: a streaming drift-detector handle for
//! embedding the loss monitor in other runtimes, a JSON-in/JSON-out
//! experiment runner, and the randomized theory verifier. Every fallible
//! call returns a [`DfStatus`]; on failure a thread-local message is set
//! and can be fetched with [`df_last_error_message`]. Strings returned to
//! the caller are owned C strings and must be released with
//! [`df_string_free`]. Handles are opaque and must be released with their
//! matching `_free` function. No call aborts on panic; panics are caught
//! and reported as [`DfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use drift_forge::detector::{
    threshold_from_significance, DetectorConfig, DetectorState, VerdictKind,
};
use drift_forge::harness::{run_experiment, ExperimentConfig};
use drift_forge::theory::{run_verification, VerificationOptions};
use drift_forge::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration, rejected before any computation.
    Config = 3,
    /// Malformed input data.
    Parse = 4,
    /// An argument or index outside its documented range.
    OutOfRange = 5,
    /// Non-finite value, singular matrix, or failed numerical routine.
    Numeric = 6,
    Io = 7,
    /// JSON (de)serialization failure.
    Serialization = 8,
    /// An internal panic was caught at the boundary.
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(sanitized).unwrap_or_default());
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn fail(status: DfStatus, message: &str) -> DfStatus {
    set_error(message);
    status
}

fn status_of(error: &Error) -> DfStatus {
    match error {
        Error::Config(_) => DfStatus::Config,
        Error::Parse { .. } => DfStatus::Parse,
        Error::Bounds(_) => DfStatus::OutOfRange,
        Error::Numeric(_) => DfStatus::Numeric,
        Error::Io(_) => DfStatus::Io,
        Error::Serialization(_) => DfStatus::Serialization,
    }
}

/// Runs a closure with panics converted to [`DfStatus::Panic`]; a closure
/// returning `Ok` clears the error slot.
fn guarded<F: FnOnce() -> DfStatus>(f: F) -> DfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == DfStatus::Ok {
                clear_error();
            }
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unidentified panic".to_string());
            fail(DfStatus::Panic, &format!("caught panic: {message}"))
        }
    }
}

fn give_string(text: String) -> *mut c_char {
    CString::new(text.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Version of the linked library as a static string; do not free it.
#[no_mangle]
pub extern "C" fn df_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the message of the most recent failure on this thread as a new
/// owned string, or null when the last call succeeded. Free the result
/// with [`df_string_free`].
#[no_mangle]
pub extern "C" fn df_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(message) => message.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
///
/// `s` must be a pointer previously returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn df_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Two-sided z threshold for a given significance level, written to
/// `out_threshold`.
///
/// # Safety
///
/// `out_threshold` must point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn df_threshold_from_significance(
    significance: f64,
    out_threshold: *mut f64,
) -> DfStatus {
    guarded(|| {
        if out_threshold.is_null() {
            return fail(DfStatus::NullPointer, "out_threshold is null");
        }
        match threshold_from_significance(significance) {
            Ok(threshold) => {
                *out_threshold = threshold;
                DfStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Opaque streaming drift detector; see `df_detector_new`.
pub struct DfDetector {
    inner: DetectorState,
}

/// Outcome of one detector check. The statistics are NaN whenever the
/// buffer was too short (or too flat) to compute them.
#[repr(C)]
pub struct DfVerdict {
    pub kind: DfVerdictKind,
    pub z_score: f64,
    pub mu: f64,
    pub sigma: f64,
    pub mu_tilde: f64,
}

/// Detector check outcome kind.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfVerdictKind {
    NoDrift = 0,
    DriftAlarm = 1,
    ScheduledRefresh = 2,
}

/// Creates a drift detector watching the trailing `window_len` losses at
/// the given two-sided significance, with a scheduled refresh every
/// `refresh_interval` recorded losses. The new handle is written to
/// `out_detector`; release it with [`df_detector_free`].
///
/// # Safety
///
/// `out_detector` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn df_detector_new(
    window_len: usize,
    significance: f64,
    refresh_interval: usize,
    out_detector: *mut *mut DfDetector,
) -> DfStatus {
    guarded(|| {
        if out_detector.is_null() {
            return fail(DfStatus::NullPointer, "out_detector is null");
        }
        let config = match DetectorConfig::new(window_len, significance, refresh_interval) {
            Ok(c) => c,
            Err(e) => return fail(status_of(&e), &e.to_string()),
        };
        match DetectorState::new(config) {
            Ok(inner) => {
                *out_detector = Box::into_raw(Box::new(DfDetector { inner }));
                DfStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Appends one per-round loss to the detector buffer.
///
/// # Safety
///
/// `detector` must be a live handle from [`df_detector_new`].
#[no_mangle]
pub unsafe extern "C" fn df_detector_record_loss(
    detector: *mut DfDetector,
    loss: f64,
) -> DfStatus {
    guarded(|| {
        let Some(handle) = detector.as_mut() else {
            return fail(DfStatus::NullPointer, "detector is null");
        };
        match handle.inner.record_loss(loss) {
            Ok(()) => DfStatus::Ok,
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Runs the drift test on the current buffer and writes the verdict to
/// `out_verdict`. Recording and checking are separate so one round may
/// record several losses before a single check.
///
/// # Safety
///
/// `detector` must be a live handle and `out_verdict` must point to
/// writable memory for one `DfVerdict`.
#[no_mangle]
pub unsafe extern "C" fn df_detector_check(
    detector: *const DfDetector,
    out_verdict: *mut DfVerdict,
) -> DfStatus {
    guarded(|| {
        let Some(handle) = detector.as_ref() else {
            return fail(DfStatus::NullPointer, "detector is null");
        };
        if out_verdict.is_null() {
            return fail(DfStatus::NullPointer, "out_verdict is null");
        }
        let verdict = handle.inner.check();
        *out_verdict = DfVerdict {
            kind: match verdict.kind {
                VerdictKind::NoDrift => DfVerdictKind::NoDrift,
                VerdictKind::DriftAlarm => DfVerdictKind::DriftAlarm,
                VerdictKind::ScheduledRefresh => DfVerdictKind::ScheduledRefresh,
            },
            z_score: verdict.z_score.unwrap_or(f64::NAN),
            mu: verdict.mu.unwrap_or(f64::NAN),
            sigma: verdict.sigma.unwrap_or(f64::NAN),
            mu_tilde: verdict.mu_tilde.unwrap_or(f64::NAN),
        };
        DfStatus::Ok
    })
}

/// Clears the loss buffer and the refresh counter.
///
/// # Safety
///
/// `detector` must be a live handle from [`df_detector_new`].
#[no_mangle]
pub unsafe extern "C" fn df_detector_reset(detector: *mut DfDetector) -> DfStatus {
    guarded(|| {
        let Some(handle) = detector.as_mut() else {
            return fail(DfStatus::NullPointer, "detector is null");
        };
        handle.inner.reset();
        DfStatus::Ok
    })
}

/// Number of losses currently buffered, written to `out_len`.
///
/// # Safety
///
/// `detector` must be a live handle and `out_len` must point to writable
/// memory for one `size_t`.
#[no_mangle]
pub unsafe extern "C" fn df_detector_buffer_len(
    detector: *const DfDetector,
    out_len: *mut usize,
) -> DfStatus {
    guarded(|| {
        let Some(handle) = detector.as_ref() else {
            return fail(DfStatus::NullPointer, "detector is null");
        };
        if out_len.is_null() {
            return fail(DfStatus::NullPointer, "out_len is null");
        }
        *out_len = handle.inner.buffer_len();
        DfStatus::Ok
    })
}

/// Releases a detector handle. Null is ignored.
///
/// # Safety
///
/// `detector` must be a handle from [`df_detector_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn df_detector_free(detector: *mut DfDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Runs one experiment from a JSON configuration and returns the report as
/// a JSON string in `out_report_json` (free it with [`df_string_free`]).
/// The configuration object matches the TOML schema of the CLI: a `data`
/// source plus optional overrides. When the config carries an `out_dir`,
/// the trace and model artifacts are also written there.
///
/// # Safety
///
/// `config_json` must be a valid NUL-terminated string and
/// `out_report_json` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn df_run_experiment_json(
    config_json: *const c_char,
    out_report_json: *mut *mut c_char,
) -> DfStatus {
    guarded(|| {
        if config_json.is_null() {
            return fail(DfStatus::NullPointer, "config_json is null");
        }
        if out_report_json.is_null() {
            return fail(DfStatus::NullPointer, "out_report_json is null");
        }
        let text = match CStr::from_ptr(config_json).to_str() {
            Ok(t) => t,
            Err(_) => return fail(DfStatus::InvalidUtf8, "config_json is not valid UTF-8"),
        };
        let config: ExperimentConfig = match serde_json::from_str(text) {
            Ok(c) => c,
            Err(e) => return fail(DfStatus::Serialization, &format!("config parse: {e}")),
        };
        match run_experiment(&config) {
            Ok((report, _trace)) => match serde_json::to_string(&report) {
                Ok(json) => {
                    *out_report_json = give_string(json);
                    DfStatus::Ok
                }
                Err(e) => fail(DfStatus::Serialization, &e.to_string()),
            },
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Runs the randomized verification sweeps of the covariance-gap analysis
/// (instance dimensions up to `max_dim`, `trials` instances per sweep,
/// deterministic in `seed`) and returns the report as a JSON string in
/// `out_report_json` (free it with [`df_string_free`]).
///
/// # Safety
///
/// `out_report_json` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn df_verify_theory_json(
    max_dim: usize,
    trials: usize,
    seed: u64,
    out_report_json: *mut *mut c_char,
) -> DfStatus {
    guarded(|| {
        if out_report_json.is_null() {
            return fail(DfStatus::NullPointer, "out_report_json is null");
        }
        if max_dim < 2 {
            return fail(DfStatus::Config, "max_dim must be at least 2");
        }
        if trials == 0 {
            return fail(DfStatus::Config, "trials must be at least 1");
        }
        let opts = VerificationOptions {
            seed,
            prop1_instances: trials,
            prop1_max_d: max_dim,
            theorem1_instances: trials,
            theorem1_max_d: max_dim,
            theorem2_statement_target: trials,
            theorem2_max_d: max_dim,
            ..VerificationOptions::default()
        };
        match run_verification(&opts) {
            Ok(report) => match serde_json::to_string(&report) {
                Ok(json) => {
                    *out_report_json = give_string(json);
                    DfStatus::Ok
                }
                Err(e) => fail(DfStatus::Serialization, &e.to_string()),
            },
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}
