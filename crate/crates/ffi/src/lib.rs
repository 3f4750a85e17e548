//! C interface to trained GIM and softmax-baseline models.
//!
//! Models are loaded from the JSON files written by the `gim` tool and live
//! behind an opaque `GimModel` handle. Every fallible function returns a
//! `GimStatus`; on failure a description is available from
//! `gim_last_error_message` on the same thread. Panics never cross the
//! boundary.
//!
//! The header `include/gim.h` is regenerated by the build script.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gim::metrics::{auroc, pool};
use gim::{GimError, Model, Tensor};

/// Result codes shared by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    DimensionMismatch = 5,
    Uncalibrated = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// Opaque handle to a loaded model.
pub struct GimModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: GimStatus, msg: impl Into<String>) -> GimStatus {
    set_error(msg);
    status
}

fn from_error(e: GimError) -> GimStatus {
    let status = match &e {
        GimError::Io { .. } => GimStatus::Io,
        GimError::Model(_) | GimError::Config(_) | GimError::Idx(_) => GimStatus::Parse,
        GimError::Shape(_) => GimStatus::DimensionMismatch,
        _ => GimStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting a panic into `GimStatus::Panic`.
fn guard(f: impl FnOnce() -> GimStatus) -> GimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == GimStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            s
        }
        Err(_) => fail(GimStatus::Panic, "internal panic"),
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize) -> Option<&'a [f64]> {
    if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

fn rows(model: &Model, input: &[f64], n: usize) -> Result<Tensor, GimStatus> {
    let d = model.input_dim();
    if n == 0 || input.len() != n * d {
        return Err(fail(
            GimStatus::DimensionMismatch,
            format!("model expects {n} rows of {d} features, got {} values", input.len()),
        ));
    }
    Tensor::matrix(n, d, input.to_vec()).map_err(from_error)
}

/// Loads a model file. On success `*out_model` owns a handle that must be
/// released with `gim_model_free`.
#[no_mangle]
pub unsafe extern "C" fn gim_model_load(path: *const c_char, out_model: *mut *mut GimModel) -> GimStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            return fail(GimStatus::NullPointer, "path and out_model must be non-null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(GimStatus::InvalidUtf8, "path is not valid UTF-8");
        };
        match Model::load(Path::new(path)) {
            Ok(model) => {
                *out_model = Box::into_raw(Box::new(GimModel { model }));
                GimStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle from `gim_model_load`. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn gim_model_free(model: *mut GimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input features, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn gim_model_input_dim(model: *const GimModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_dim())
}

/// Number of classes, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn gim_model_num_classes(model: *const GimModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_classes())
}

/// Width of the trunk output, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn gim_model_output_dim(model: *const GimModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.trunk().output_dim())
}

/// True for Gaussian isolation models, false for softmax baselines.
#[no_mangle]
pub unsafe extern "C" fn gim_model_is_gaussian(model: *const GimModel) -> bool {
    model.as_ref().is_some_and(|m| matches!(m.model, Model::Gim(_)))
}

/// Writes the calibrated OOD threshold.
#[no_mangle]
pub unsafe extern "C" fn gim_model_threshold(model: *const GimModel, out_threshold: *mut f64) -> GimStatus {
    guard(|| {
        let (Some(m), false) = (model.as_ref(), out_threshold.is_null()) else {
            return fail(GimStatus::NullPointer, "model and out_threshold must be non-null");
        };
        match m.model.threshold() {
            Some(t) => {
                *out_threshold = t;
                GimStatus::Ok
            }
            None => fail(GimStatus::Uncalibrated, "model has no OOD threshold"),
        }
    })
}

/// Classifies `n_rows` row-major inputs of `gim_model_input_dim` features
/// each. `out_classes` and `out_scores` receive one entry per row; the score
/// is the OOD confidence (higher means more in-distribution).
#[no_mangle]
pub unsafe extern "C" fn gim_model_predict(
    model: *const GimModel,
    inputs: *const f64,
    len: usize,
    n_rows: usize,
    out_classes: *mut usize,
    out_scores: *mut f64,
) -> GimStatus {
    guard(|| {
        let (Some(m), Some(input)) = (model.as_ref(), slice(inputs, len)) else {
            return fail(GimStatus::NullPointer, "model and inputs must be non-null");
        };
        if out_classes.is_null() || out_scores.is_null() {
            return fail(GimStatus::NullPointer, "output buffers must be non-null");
        }
        let x = match rows(&m.model, input, n_rows) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match m.model.classify(&x) {
            Ok(out) => {
                for (i, (c, s)) in out.into_iter().enumerate() {
                    *out_classes.add(i) = c;
                    *out_scores.add(i) = s;
                }
                GimStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Flags each of `n_rows` inputs as out-of-distribution (score below the
/// calibrated threshold).
#[no_mangle]
pub unsafe extern "C" fn gim_model_is_ood(
    model: *const GimModel,
    inputs: *const f64,
    len: usize,
    n_rows: usize,
    out_flags: *mut bool,
) -> GimStatus {
    guard(|| {
        let (Some(m), Some(input)) = (model.as_ref(), slice(inputs, len)) else {
            return fail(GimStatus::NullPointer, "model and inputs must be non-null");
        };
        if out_flags.is_null() {
            return fail(GimStatus::NullPointer, "out_flags must be non-null");
        }
        let Some(t) = m.model.threshold() else {
            return fail(GimStatus::Uncalibrated, "model has no OOD threshold");
        };
        let x = match rows(&m.model, input, n_rows) {
            Ok(x) => x,
            Err(s) => return s,
        };
        match m.model.scores(&x) {
            Ok(scores) => {
                for (i, s) in scores.into_iter().enumerate() {
                    *out_flags.add(i) = s < t;
                }
                GimStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// AUROC of in-distribution against out-of-distribution scores.
#[no_mangle]
pub unsafe extern "C" fn gim_auroc(
    in_scores: *const f64,
    n_in: usize,
    out_scores: *const f64,
    n_out: usize,
    out_auroc: *mut f64,
) -> GimStatus {
    guard(|| {
        let (Some(a), Some(b)) = (slice(in_scores, n_in), slice(out_scores, n_out)) else {
            return fail(GimStatus::NullPointer, "score arrays must be non-null");
        };
        if out_auroc.is_null() {
            return fail(GimStatus::NullPointer, "out_auroc must be non-null");
        }
        match auroc(&pool(a, b)) {
            Ok(v) => {
                *out_auroc = v;
                GimStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a NUL-terminated string.
#[no_mangle]
pub extern "C" fn gim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
