//! C interface to trained classifiers: load a checkpoint, predict class
//! probabilities, compute Grad-CAM maps and score predictions.
//!
//! Every fallible function returns a [`KdStatus`]. On failure the message is
//! kept per thread and read with [`kd_last_error_message`]. Objects handed
//! out by the library are opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kdistill::data::Image;
use kdistill::explain::grad_cam;
use kdistill::metrics::{predict_images, MetricsReport};
use kdistill::models::Model;
use kdistill::training::{peek_version, Checkpoint};
use kdistill::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    InvalidArgument = 1,
    NotFound = 2,
    Unavailable = 3,
    Io = 4,
    Parse = 5,
    VersionMismatch = 6,
    Config = 7,
    Diverged = 8,
    NullPointer = 9,
    Internal = 10,
    Panic = 11,
}

/// Headline metrics of a score matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct KdMetrics {
    pub acc: f64,
    pub bacc: f64,
    pub auc_macro: f64,
    pub map_macro: f64,
}

/// Shape a model expects and produces.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KdModelInfo {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A loaded classifier.
pub struct KdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> KdStatus {
    match err {
        Error::InvalidArgument(_) => KdStatus::InvalidArgument,
        Error::NotFound(_) => KdStatus::NotFound,
        Error::Unavailable(_) => KdStatus::Unavailable,
        Error::Load { .. } | Error::Io(_) | Error::Image(_) => KdStatus::Io,
        Error::MalformedManifest { .. } | Error::Parse { .. } | Error::Json(_) => KdStatus::Parse,
        Error::VersionMismatch { .. } => KdStatus::VersionMismatch,
        Error::Config(_) | Error::RunDirExists(_) => KdStatus::Config,
        Error::Diverged { .. } => KdStatus::Diverged,
        Error::Tensor(_) => KdStatus::Internal,
    }
}

struct Failure(KdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(KdStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(KdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            KdStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_arg<'a>(m: *const KdModel) -> Result<&'a KdModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn images_arg(pixels: *const f32, count: usize, channels: usize, height: usize, width: usize) -> Result<Vec<Image>, Failure> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let per = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .filter(|&v| v > 0)
        .ok_or_else(|| invalid("image dimensions must be positive"))?;
    let total = per.checked_mul(count).ok_or_else(|| invalid("image buffer too large"))?;
    let data = std::slice::from_raw_parts(pixels, total);
    data.chunks(per)
        .map(|c| Image::new(channels, height, width, c.to_vec()).map_err(Failure::from))
        .collect()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn kd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Format version stored in a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kd_checkpoint_version(path: *const c_char, out: *mut u32) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = peek_version(&path)?;
        Ok(())
    })
}

/// Load the model stored in a checkpoint. Release it with [`kd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kd_model_load(path: *const c_char, out: *mut *mut KdModel) -> KdStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let model = Checkpoint::load(&path)?.model()?;
        *out = Box::into_raw(Box::new(KdModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`kd_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kd_model_free(model: *mut KdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn kd_model_info(model: *const KdModel, out: *mut KdModelInfo) -> KdStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let spec = m.model.spec();
        *out = KdModelInfo {
            classes: spec.class_count,
            channels: spec.input_size.channels,
            height: spec.input_size.height,
            width: spec.input_size.width,
        };
        Ok(())
    })
}

/// Class probabilities for `count` images stored contiguously in
/// channel-major order (`count×channels×height×width`). Images are resized
/// to the model input. `out` receives `count×classes` values.
///
/// # Safety
/// `pixels` must hold `count*channels*height*width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn kd_model_predict(
    model: *const KdModel,
    pixels: *const f32,
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
    out_len: usize,
) -> KdStatus {
    guard(|| {
        let m = model_arg(model)?;
        if count == 0 {
            return Err(invalid("count must be positive"));
        }
        let classes = m.model.spec().class_count;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != count * classes {
            return Err(invalid(format!("out holds {out_len} values, {} needed", count * classes)));
        }
        let images = images_arg(pixels, count, channels, height, width)?;
        let scores = predict_images(&m.model, &images)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, s) in dst.iter_mut().zip(scores.iter().flatten()) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// Grad-CAM heat map of `class_index` for one image, at the image's size
/// (`height×width` values in `[0, 1]`).
///
/// # Safety
/// `pixels` must hold `channels*height*width` floats and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn kd_model_grad_cam(
    model: *const KdModel,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    class_index: usize,
    out: *mut f32,
    out_len: usize,
) -> KdStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != height * width {
            return Err(invalid(format!("out holds {out_len} values, {} needed", height * width)));
        }
        let image = images_arg(pixels, 1, channels, height, width)?.remove(0);
        let map = grad_cam(&m.model, &image, class_index)?;
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, s) in dst.iter_mut().zip(&map.heat) {
            *d = *s as f32;
        }
        Ok(())
    })
}

unsafe fn report_arg(scores: *const f64, labels: *const usize, count: usize, classes: usize) -> Result<MetricsReport, Failure> {
    if scores.is_null() {
        return Err(null("scores"));
    }
    if labels.is_null() {
        return Err(null("labels"));
    }
    if count == 0 || classes < 2 {
        return Err(invalid("need at least one row and two classes"));
    }
    let flat = std::slice::from_raw_parts(scores, count * classes);
    let rows: Vec<Vec<f64>> = flat.chunks(classes).map(<[f64]>::to_vec).collect();
    let labels = std::slice::from_raw_parts(labels, count);
    let names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    Ok(MetricsReport::from_scores(&rows, labels, &names)?)
}

/// Accuracy, balanced accuracy, macro AUC and macro mAP of a
/// `count×classes` score matrix against integer labels.
///
/// # Safety
/// `scores` must hold `count*classes` doubles, `labels` `count` entries.
#[no_mangle]
pub unsafe extern "C" fn kd_metrics_evaluate(
    scores: *const f64,
    labels: *const usize,
    count: usize,
    classes: usize,
    out: *mut KdMetrics,
) -> KdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = report_arg(scores, labels, count, classes)?;
        *out = KdMetrics { acc: r.acc, bacc: r.bacc, auc_macro: r.auc_macro, map_macro: r.map_macro };
        Ok(())
    })
}

/// Full metrics report as JSON. Release the string with [`kd_string_free`].
///
/// # Safety
/// As [`kd_metrics_evaluate`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kd_metrics_report_json(
    scores: *const f64,
    labels: *const usize,
    count: usize,
    classes: usize,
    out: *mut *mut c_char,
) -> KdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let json = report_arg(scores, labels, count, classes)?.to_json()?;
        *out = CString::new(json).map_err(|e| Failure(KdStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
