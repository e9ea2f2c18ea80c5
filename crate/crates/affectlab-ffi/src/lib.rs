//! C ABI for the affect-recognition library: metric evaluation, the
//! CCC/Jensen-Shannon primitives, synthetic dataset generation, and
//! checkpoint-based prediction behind opaque handles.
//!
//! Conventions: every fallible call returns an `AfStatus`; on failure a
//! thread-local message is readable through `af_last_error`. Strings
//! returned as `char*` are owned by the caller and released with
//! `af_string_free`; opaque handles have matching `_free` functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use affectlab::data::{synth_dataset, AugmentMode, ImageTensor, Task, NUM_AUS};
use affectlab::engine::{load_model, predict_rows, LoadedModel};
use affectlab::error::Error;
use affectlab::metrics::{eval_lsd_files, eval_mtl_files, MetricReport};
use affectlab::nn::derive_rng;
use affectlab::objectives::{ccc, js_divergence};

/// Result codes mirroring the library's error classes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfStatus {
    AfOk = 0,
    AfInvalidArgument = 1,
    AfConfigError = 2,
    AfDataError = 3,
    AfIoError = 4,
    AfInternalError = 5,
}

/// Task selector for dataset generation and evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfTask {
    AfTaskMtl = 0,
    AfTaskLsd = 1,
}

/// Decided predictions for one face image.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AfPrediction {
    pub valence: f64,
    pub arousal: f64,
    pub expression: i32,
    pub au: [u8; 12],
}

/// Opaque evaluation report handle.
pub struct AfReport {
    inner: MetricReport,
}

/// Opaque trained-model handle.
pub struct AfModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> AfStatus {
    match err.exit_code() {
        2 => AfStatus::AfConfigError,
        3 => AfStatus::AfDataError,
        _ => match err {
            Error::Io { .. } => AfStatus::AfIoError,
            Error::Input(_) | Error::Shape(_) => AfStatus::AfInvalidArgument,
            _ => AfStatus::AfInternalError,
        },
    }
}

fn guard(f: impl FnOnce() -> AfStatus + std::panic::UnwindSafe) -> AfStatus {
    match catch_unwind(f) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            AfStatus::AfInternalError
        }
    }
}

unsafe fn cstr_path<'a>(p: *const c_char) -> Result<&'a Path, AfStatus> {
    if p.is_null() {
        set_error("null path");
        return Err(AfStatus::AfInvalidArgument);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(AfStatus::AfInvalidArgument)
        }
    }
}

fn task_of(t: AfTask) -> Task {
    match t {
        AfTask::AfTaskMtl => Task::Mtl,
        AfTask::AfTaskLsd => Task::Lsd,
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn af_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the last error on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn af_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn af_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Concordance correlation coefficient of two equal-length vectors.
///
/// # Safety
/// `x` and `y` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn af_ccc(
    x: *const f64,
    y: *const f64,
    len: usize,
    out: *mut f64,
) -> AfStatus {
    if x.is_null() || y.is_null() || out.is_null() {
        set_error("null pointer");
        return AfStatus::AfInvalidArgument;
    }
    let xs = std::slice::from_raw_parts(x, len);
    let ys = std::slice::from_raw_parts(y, len);
    guard(AssertUnwindSafe(|| match ccc(xs, ys) {
        Ok(v) => {
            *out = v;
            AfStatus::AfOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }))
}

/// Jensen-Shannon divergence (natural log) of two probability vectors.
///
/// # Safety
/// `p` and `q` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn af_js_divergence(
    p: *const f64,
    q: *const f64,
    len: usize,
    out: *mut f64,
) -> AfStatus {
    if p.is_null() || q.is_null() || out.is_null() {
        set_error("null pointer");
        return AfStatus::AfInvalidArgument;
    }
    let ps = std::slice::from_raw_parts(p, len);
    let qs = std::slice::from_raw_parts(q, len);
    guard(AssertUnwindSafe(|| match js_divergence(ps, qs) {
        Ok(v) => {
            *out = v;
            AfStatus::AfOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }))
}

/// Generate a synthetic labeled dataset directory (PNG images plus
/// labels.csv).
///
/// # Safety
/// `dir` must be a valid NUL-terminated path string.
#[no_mangle]
pub unsafe extern "C" fn af_gen_synth_dataset(
    dir: *const c_char,
    n: u64,
    task: AfTask,
    seed: u64,
) -> AfStatus {
    let dir = match cstr_path(dir) {
        Ok(d) => d.to_path_buf(),
        Err(s) => return s,
    };
    if n == 0 {
        set_error("n must be >= 1");
        return AfStatus::AfConfigError;
    }
    guard(AssertUnwindSafe(move || {
        let data = synth_dataset(n as usize, task_of(task), seed);
        match affectlab::data::write_dataset_dir(&dir, &data) {
            Ok(()) => AfStatus::AfOk,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    }))
}

/// Score a prediction CSV against a label CSV; on success `*out` owns a new
/// report handle.
///
/// # Safety
/// Paths must be valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn af_evaluate(
    task: AfTask,
    pred_path: *const c_char,
    labels_path: *const c_char,
    out: *mut *mut AfReport,
) -> AfStatus {
    if out.is_null() {
        set_error("null output pointer");
        return AfStatus::AfInvalidArgument;
    }
    let pred = match cstr_path(pred_path) {
        Ok(p) => p.to_path_buf(),
        Err(s) => return s,
    };
    let labels = match cstr_path(labels_path) {
        Ok(p) => p.to_path_buf(),
        Err(s) => return s,
    };
    guard(AssertUnwindSafe(move || {
        let result = match task {
            AfTask::AfTaskMtl => eval_mtl_files(&pred, &labels),
            AfTask::AfTaskLsd => eval_lsd_files(&pred, &labels),
        };
        match result {
            Ok(report) => {
                *out = Box::into_raw(Box::new(AfReport { inner: report }));
                AfStatus::AfOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    }))
}

/// Aggregate challenge score of a report (P_MTL or P_LSD).
///
/// # Safety
/// `report` must be a live handle from `af_evaluate`.
#[no_mangle]
pub unsafe extern "C" fn af_report_score(report: *const AfReport, out: *mut f64) -> AfStatus {
    if report.is_null() || out.is_null() {
        set_error("null pointer");
        return AfStatus::AfInvalidArgument;
    }
    *out = (*report).inner.p_score;
    AfStatus::AfOk
}

/// Valence and arousal CCC of a multi-task report.
///
/// # Safety
/// `report` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn af_report_ccc(
    report: *const AfReport,
    out_v: *mut f64,
    out_a: *mut f64,
) -> AfStatus {
    if report.is_null() || out_v.is_null() || out_a.is_null() {
        set_error("null pointer");
        return AfStatus::AfInvalidArgument;
    }
    *out_v = (*report).inner.ccc_v;
    *out_a = (*report).inner.ccc_a;
    AfStatus::AfOk
}

/// Full human-readable report text (with the key=value block); the caller
/// frees it with `af_string_free`.
///
/// # Safety
/// `report` must be a live handle from `af_evaluate`.
#[no_mangle]
pub unsafe extern "C" fn af_report_text(report: *const AfReport) -> *mut c_char {
    if report.is_null() {
        return std::ptr::null_mut();
    }
    let text = (*report).inner.format_text().replace('\0', " ");
    CString::new(text)
        .map(CString::into_raw)
        .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `report` must come from `af_evaluate` and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn af_report_free(report: *mut AfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Load a trained checkpoint directory (as written by the training CLI).
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn af_model_load(path: *const c_char, out: *mut *mut AfModel) -> AfStatus {
    if out.is_null() {
        set_error("null output pointer");
        return AfStatus::AfInvalidArgument;
    }
    let path = match cstr_path(path) {
        Ok(p) => p.to_path_buf(),
        Err(s) => return s,
    };
    guard(AssertUnwindSafe(move || match load_model(&path) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(AfModel { inner: model }));
            AfStatus::AfOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }))
}

/// Task the loaded model was trained for.
///
/// # Safety
/// `model` must be a live handle from `af_model_load`.
#[no_mangle]
pub unsafe extern "C" fn af_model_task(model: *const AfModel) -> AfTask {
    match (*model).inner.task() {
        Task::Mtl => AfTask::AfTaskMtl,
        Task::Lsd => AfTask::AfTaskLsd,
    }
}

/// Predict on one RGB image given as channel-major floats in [0, 1]
/// (length 3*height*width). Any square size >= 112 is accepted; the image
/// is resized to the model input internally.
///
/// # Safety
/// `pixels` must hold `3*height*width` readable floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn af_model_predict(
    model: *const AfModel,
    pixels: *const f32,
    height: usize,
    width: usize,
    out: *mut AfPrediction,
) -> AfStatus {
    if model.is_null() || pixels.is_null() || out.is_null() {
        set_error("null pointer");
        return AfStatus::AfInvalidArgument;
    }
    if height < 112 || width < 112 {
        set_error("image must be at least 112x112");
        return AfStatus::AfInvalidArgument;
    }
    let data = std::slice::from_raw_parts(pixels, 3 * height * width).to_vec();
    let model = &(*model).inner;
    guard(AssertUnwindSafe(move || {
        let raw = ImageTensor {
            channels: 3,
            height,
            width,
            data,
        };
        let mut rng = derive_rng(0, &[0]);
        let img = match affectlab::data::augment(&raw, AugmentMode::Eval, &mut rng) {
            Ok(i) => i,
            Err(e) => {
                set_error(&e.to_string());
                return status_of(&e);
            }
        };
        match predict_rows(model, &[&img], &["x".to_string()]) {
            Ok(rows) => {
                let r = &rows[0];
                let mut au = [0u8; NUM_AUS];
                au.copy_from_slice(&r.au);
                *out = AfPrediction {
                    valence: r.valence,
                    arousal: r.arousal,
                    expression: r.expression,
                    au,
                };
                AfStatus::AfOk
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    }))
}

/// # Safety
/// `model` must come from `af_model_load` and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn af_model_free(model: *mut AfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
