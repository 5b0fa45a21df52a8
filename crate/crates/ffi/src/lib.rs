//! C ABI over `elt-core`.
//!
//! Every fallible function returns an `EltStatus`. On failure a message is
//! kept per thread and can be read with [`elt_last_error`]. Models are
//! opaque handles created by [`elt_model_load`] and released with
//! [`elt_model_free`]. Panics never cross the boundary; they surface as
//! `ELT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use elt_core::attention::{linear_attention, local_attention, standard_attention};
use elt_core::checkpoint::Checkpoint;
use elt_core::eval;
use elt_core::tensor::Tensor;
use elt_core::{EltError, ErrorKind};

/// Result codes. Nonzero codes match the `elt` CLI exit codes where both exist.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltStatus {
    Ok = 0,
    /// Invalid argument, configuration or dimension.
    Config = 2,
    /// Malformed or inconsistent input data or checkpoint.
    Data = 3,
    /// NaN or other numeric failure.
    Numeric = 4,
    Io = 5,
    /// A required pointer was null.
    NullPointer = 6,
    /// Internal panic caught at the boundary.
    Panic = 7,
}

/// Attention kernel selector for [`elt_attention`].
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltKernel {
    Standard = 0,
    Linear = 1,
    Local = 2,
}

/// Opaque trained model.
pub struct EltModel {
    ckpt: Checkpoint,
    appliance: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

fn status_of(err: &EltError) -> EltStatus {
    match err.kind() {
        ErrorKind::Config => EltStatus::Config,
        ErrorKind::Data => EltStatus::Data,
        ErrorKind::Numeric => EltStatus::Numeric,
        ErrorKind::Io => EltStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), EltStatus>) -> EltStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EltStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            EltStatus::Panic
        }
    }
}

fn fail(err: EltError) -> EltStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(what: &str) -> EltStatus {
    set_error(format!("{what} is null"));
    EltStatus::NullPointer
}

/// Message describing the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next call into this library
/// from the same thread.
#[no_mangle]
pub extern "C" fn elt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn elt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` receives a handle that must be
/// released with [`elt_model_free`].
///
/// # Safety
/// `path` must be a valid nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elt_model_load(path: *const c_char, out: *mut *mut EltModel) -> EltStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(EltError::Config("path is not UTF-8".into())))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(fail)?;
        let appliance = CString::new(ckpt.appliance.replace('\0', " ")).expect("no interior nul");
        unsafe { *out = Box::into_raw(Box::new(EltModel { ckpt, appliance })) };
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`elt_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn elt_model_free(model: *mut EltModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Window length the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn elt_model_input_len(model: *const EltModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.ckpt.model.config().input_len)
}

/// Appliance name the model was trained for; valid while the handle lives.
/// Null for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn elt_model_appliance(model: *const EltModel) -> *const c_char {
    unsafe { model.as_ref() }.map_or(ptr::null(), |m| m.appliance.as_ptr())
}

/// On-threshold in watts stored with the model; falls back to the built-in
/// table. Fails with `ELT_STATUS_CONFIG` when neither knows the appliance.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn elt_model_on_threshold(model: *const EltModel, out: *mut f64) -> EltStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let watts = match m.ckpt.on_threshold {
            Some(w) => w,
            None => eval::ApplianceThresholds::default()
                .require(&m.ckpt.appliance)
                .map_err(fail)?,
        };
        unsafe { *out = watts };
        Ok(())
    })
}

/// Predicts the appliance power (watts, clamped at 0) at the midpoint of a
/// window of `len` raw mains readings in watts.
///
/// # Safety
/// `model` must be a live handle, `mains` must point to `len` doubles and
/// `out_watts` must be valid.
#[no_mangle]
pub unsafe extern "C" fn elt_model_predict(
    model: *const EltModel,
    mains: *const f64,
    len: usize,
    out_watts: *mut f64,
) -> EltStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if mains.is_null() {
            return Err(null("mains"));
        }
        if out_watts.is_null() {
            return Err(null("out_watts"));
        }
        let raw = unsafe { std::slice::from_raw_parts(mains, len) };
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(fail(EltError::Data("mains window contains a non-finite value".into())));
        }
        let norm: Vec<f64> = raw.iter().map(|&v| m.ckpt.mains_stats.normalize(v.max(0.0))).collect();
        let pred = m.ckpt.model.predict(&norm).map_err(fail)?;
        unsafe { *out_watts = eval::denormalize(pred, &m.ckpt.appliance_stats) };
        Ok(())
    })
}

/// Single-head attention on row-major `l × d` matrices, written to `out`
/// (also `l × d`). `kernel` is an `EltKernel` value; `l_win` is used by the
/// local kernel only.
///
/// # Safety
/// `q`, `k`, `v` and `out` must each point to `l * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn elt_attention(
    kernel: i32,
    q: *const f64,
    k: *const f64,
    v: *const f64,
    l: usize,
    d: usize,
    l_win: usize,
    out: *mut f64,
) -> EltStatus {
    guard(|| {
        for (p, name) in [(q, "q"), (k, "k"), (v, "v")] {
            if p.is_null() {
                return Err(null(name));
            }
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = l.checked_mul(d).ok_or_else(|| fail(EltError::Config("l * d overflows".into())))?;
        let mat = |p: *const f64| {
            Tensor::matrix(l, d, unsafe { std::slice::from_raw_parts(p, n) }.to_vec()).map_err(fail)
        };
        let (tq, tk, tv) = (mat(q)?, mat(k)?, mat(v)?);
        let res = match kernel {
            k if k == EltKernel::Standard as i32 => standard_attention(&tq, &tk, &tv),
            k if k == EltKernel::Linear as i32 => linear_attention(&tq, &tk, &tv),
            k if k == EltKernel::Local as i32 => local_attention(&tq, &tk, &tv, l_win),
            other => Err(EltError::Config(format!("unknown kernel {other}"))),
        }
        .map_err(fail)?;
        unsafe { std::slice::from_raw_parts_mut(out, n) }.copy_from_slice(res.data());
        Ok(())
    })
}

/// F1 and MCC of on/off status vectors (nonzero byte = on). Either output
/// pointer may be null.
///
/// # Safety
/// `pred` and `truth` must point to `n` bytes each.
#[no_mangle]
pub unsafe extern "C" fn elt_f1_mcc(
    pred: *const u8,
    truth: *const u8,
    n: usize,
    out_f1: *mut f64,
    out_mcc: *mut f64,
) -> EltStatus {
    guard(|| {
        if pred.is_null() {
            return Err(null("pred"));
        }
        if truth.is_null() {
            return Err(null("truth"));
        }
        let conv = |p: *const u8| -> Vec<bool> { unsafe { std::slice::from_raw_parts(p, n) }.iter().map(|&b| b != 0).collect() };
        let (f1, mcc, _) = eval::f1_mcc(&conv(pred), &conv(truth)).map_err(fail)?;
        if !out_f1.is_null() {
            unsafe { *out_f1 = f1 };
        }
        if !out_mcc.is_null() {
            unsafe { *out_mcc = mcc };
        }
        Ok(())
    })
}
