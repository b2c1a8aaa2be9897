//! C ABI over the `fedspd` library.
//!
//! Objects cross the boundary as opaque handles created by a `*_new` or
//! `*_load` function and released with the matching `*_free`. Every fallible
//! call returns a [`FedspdStatus`]; on failure a description is available
//! from [`fedspd_last_error`] on the same thread until the next failing call.
//! Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fedspd::dp::rdp::{default_orders, rdp_subsampled_gaussian};
use fedspd::embed::EmbeddingVector;
use fedspd::espd::{EspdConfig, StreamState, WarningMonitor};
use fedspd::metrics;
use fedspd::model::LogisticModel;
use fedspd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedspdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Io = 4,
    DimensionMismatch = 5,
    Undefined = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedspdStreamState {
    Undecided = 0,
    Warned = 1,
    Negative = 2,
}

/// Opaque logistic-regression model.
pub struct FedspdModel {
    inner: LogisticModel,
}

/// Opaque streaming warning monitor.
pub struct FedspdMonitor {
    inner: WarningMonitor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FedspdStatus {
    match e {
        Error::Context(_, inner) => status_of(inner),
        Error::Parse { .. } | Error::Json { .. } => FedspdStatus::Parse,
        Error::Io { .. } => FedspdStatus::Io,
        Error::DimensionMismatch { .. } => FedspdStatus::DimensionMismatch,
        Error::Undefined(_) => FedspdStatus::Undefined,
        _ => FedspdStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FedspdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedspdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            FedspdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            FedspdStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass pointers obtained from this library or valid C
    // objects; null is rejected here.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn non_null_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: as above, for exclusive access.
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and NUL-terminated per the API contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Lib(Error::invalid(what, "not valid UTF-8")))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fedspd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedspd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse a model from checkpoint text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedspd_model_from_checkpoint(text: *const c_char, out: *mut *mut FedspdModel) -> FedspdStatus {
    guard(|| {
        let text = c_str(text, "text")?;
        let out = non_null_mut(out, "out")?;
        let inner = LogisticModel::from_checkpoint(text)?;
        *out = Box::into_raw(Box::new(FedspdModel { inner }));
        Ok(())
    })
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedspd_model_load(path: *const c_char, out: *mut *mut FedspdModel) -> FedspdStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let out = non_null_mut(out, "out")?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let inner = LogisticModel::from_checkpoint(&text)?;
        *out = Box::into_raw(Box::new(FedspdModel { inner }));
        Ok(())
    })
}

/// Feature dimension of the model; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedspd_model_dimension(model: *const FedspdModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.inner.dim())
}

/// Positive-class probability of one feature vector.
///
/// # Safety
/// `features` must point to `len` doubles; `model` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedspd_model_predict_proba(
    model: *const FedspdModel,
    features: *const f64,
    len: usize,
    out: *mut f64,
) -> FedspdStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if features.is_null() {
            return Err(Failure::Null("features"));
        }
        let out = non_null_mut(out, "out")?;
        // SAFETY: the caller guarantees `len` readable doubles.
        let xs = unsafe { std::slice::from_raw_parts(features, len) };
        let x = EmbeddingVector::new(xs.to_vec())?;
        *out = m.inner.predict_proba(&x)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedspd_model_free(model: *mut FedspdModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Create a warning monitor.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedspd_monitor_new(
    window_len: usize,
    history_len: usize,
    skepticism: usize,
    proba_threshold: f64,
    out: *mut *mut FedspdMonitor,
) -> FedspdStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let inner = WarningMonitor::new(EspdConfig {
            window_len,
            history_len,
            skepticism,
            proba_threshold,
        })?;
        *out = Box::into_raw(Box::new(FedspdMonitor { inner }));
        Ok(())
    })
}

fn export_state(s: StreamState, state: &mut FedspdStreamState, latency: Option<&mut usize>) {
    let (st, lat) = match s {
        StreamState::Undecided => (FedspdStreamState::Undecided, 0),
        StreamState::Warned { latency } => (FedspdStreamState::Warned, latency),
        StreamState::Negative => (FedspdStreamState::Negative, 0),
    };
    *state = st;
    if let Some(l) = latency {
        *l = lat;
    }
}

/// Feed one window probability. `latency` (may be null) receives the
/// warning latency once warned, 0 otherwise.
///
/// # Safety
/// `monitor` and `state` must be valid; `latency` valid or null.
#[no_mangle]
pub unsafe extern "C" fn fedspd_monitor_push(
    monitor: *mut FedspdMonitor,
    proba: f64,
    last_message: usize,
    state: *mut FedspdStreamState,
    latency: *mut usize,
) -> FedspdStatus {
    guard(|| {
        let m = non_null_mut(monitor, "monitor")?;
        let state = non_null_mut(state, "state")?;
        let s = m.inner.push(proba, last_message)?;
        export_state(s, state, unsafe { latency.as_mut() });
        Ok(())
    })
}

/// Mark the conversation complete.
///
/// # Safety
/// As for [`fedspd_monitor_push`].
#[no_mangle]
pub unsafe extern "C" fn fedspd_monitor_finish(
    monitor: *mut FedspdMonitor,
    state: *mut FedspdStreamState,
    latency: *mut usize,
) -> FedspdStatus {
    guard(|| {
        let m = non_null_mut(monitor, "monitor")?;
        let state = non_null_mut(state, "state")?;
        let s = m.inner.finish();
        export_state(s, state, unsafe { latency.as_mut() });
        Ok(())
    })
}

/// # Safety
/// `monitor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedspd_monitor_free(monitor: *mut FedspdMonitor) {
    if !monitor.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(monitor) });
    }
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedspd_penalty(latency: usize, p: f64, out: *mut f64) -> FedspdStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = metrics::penalty(latency, p)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fedspd_derive_p(median_messages: usize, out: *mut f64) -> FedspdStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        *out = metrics::derive_p(median_messages)?;
        Ok(())
    })
}

/// Speed over `n` latencies; `FEDSPD_STATUS_UNDEFINED` when `n == 0`.
///
/// # Safety
/// `latencies` must point to `n` values (may be null when `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn fedspd_speed(latencies: *const usize, n: usize, p: f64, out: *mut f64) -> FedspdStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let ls = if n == 0 {
            &[][..]
        } else if latencies.is_null() {
            return Err(Failure::Null("latencies"));
        } else {
            // SAFETY: caller guarantees `n` readable values.
            unsafe { std::slice::from_raw_parts(latencies, n) }
        };
        *out = metrics::speed(ls, p)?;
        Ok(())
    })
}

/// `f1 * speed`, or 0 when `has_speed` is false.
#[no_mangle]
pub extern "C" fn fedspd_f_latency(f1: f64, speed: f64, has_speed: bool) -> f64 {
    metrics::f_latency(f1, has_speed.then_some(speed))
}

/// Epsilon of `steps` compositions of the sampled Gaussian mechanism at
/// rate `q` and noise multiplier `z`, over the default RDP orders. `order`
/// (may be null) receives the minimising order.
///
/// # Safety
/// `epsilon` must be valid; `order` valid or null.
#[no_mangle]
pub unsafe extern "C" fn fedspd_dp_epsilon(
    q: f64,
    z: f64,
    steps: u64,
    delta: f64,
    epsilon: *mut f64,
    order: *mut f64,
) -> FedspdStatus {
    guard(|| {
        let eps = non_null_mut(epsilon, "epsilon")?;
        let curve = rdp_subsampled_gaussian(q, z, steps, &default_orders())?;
        let (e, a) = curve.best_epsilon(delta)?;
        *eps = e;
        if let Some(o) = unsafe { order.as_mut() } {
            *o = a;
        }
        Ok(())
    })
}
