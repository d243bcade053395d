// SPDX-License-Identifier: Apache-2.0

//! C ABI over `advseg`. Functions return an [`AdvsegStatus`]; on failure the message
//! is available from [`advseg_last_error`] on the same thread. Points are passed as
//! `n * 4` doubles in `x, y, z, intensity` order and labels as contiguous class ids.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use advseg::metrics::{AbsentClassPolicy, ConfusionMatrix};
use advseg::model::{load_checkpoint, Checkpoint};
use advseg::pcio::{LabeledScan, PointCloud};
use advseg::{augment, pipeline, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvsegStatus {
    Ok = 0,
    /// Null pointer, bad size or out-of-range parameter.
    InvalidArgument = 1,
    Io = 2,
    Format = 3,
    Data = 4,
    Config = 5,
    Prerequisite = 6,
    /// Output buffer too small; the required size is still written.
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Opaque trained model.
pub struct AdvsegModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> AdvsegStatus {
    match e {
        Error::Io { .. } => AdvsegStatus::Io,
        Error::Format { .. } => AdvsegStatus::Format,
        Error::Data(_) => AdvsegStatus::Data,
        Error::InvalidArgument(_) => AdvsegStatus::InvalidArgument,
        Error::Prerequisite(_) => AdvsegStatus::Prerequisite,
        Error::Config(_) => AdvsegStatus::Config,
    }
}

enum Fail {
    Status(AdvsegStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn invalid(msg: &str) -> Fail {
    Fail::Status(AdvsegStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdvsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvsegStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            AdvsegStatus::Internal
        }
    }
}

unsafe fn cloud_from(points: *const f64, n: usize) -> Result<PointCloud, Fail> {
    if n > 0 && points.is_null() {
        return Err(invalid("points is null"));
    }
    let flat = if n == 0 { &[][..] } else { std::slice::from_raw_parts(points, n * 4) };
    let rows = flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    Ok(PointCloud::new(rows)?)
}

unsafe fn labels_from<'a>(labels: *const u32, n: usize) -> Result<&'a [u32], Fail> {
    if n > 0 && labels.is_null() {
        return Err(invalid("labels is null"));
    }
    Ok(if n == 0 { &[] } else { std::slice::from_raw_parts(labels, n) })
}

/// Message of the last failed call on this thread, or null. Valid until the next call
/// that fails on the same thread.
#[no_mangle]
pub extern "C" fn advseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn advseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns a model to release with
/// [`advseg_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn advseg_model_load(
    path: *const c_char,
    out: *mut *mut AdvsegModel,
) -> AdvsegStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("null argument"));
        }
        *out = ptr::null_mut();
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let ckpt = load_checkpoint(PathBuf::from(p))?;
        *out = Box::into_raw(Box::new(AdvsegModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`advseg_model_load`] and not be used afterwards. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn advseg_model_free(model: *mut AdvsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn advseg_model_num_classes(model: *const AdvsegModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.model.num_classes())
}

/// Writes `n` labels (argmax, ties to the lower id) for an `n`-point scan.
///
/// # Safety
/// `points` must hold `4 * n` doubles and `out_labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn advseg_model_predict(
    model: *const AdvsegModel,
    points: *const f64,
    n: usize,
    out_labels: *mut u32,
) -> AdvsegStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if n > 0 && out_labels.is_null() {
            return Err(invalid("out_labels is null"));
        }
        let cloud = cloud_from(points, n)?;
        let labels = pipeline::generate_pseudo_labels(&m.ckpt.model, &cloud)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(out_labels, n).copy_from_slice(&labels);
        }
        Ok(())
    })
}

/// Polar mix: the sector `[start, start + theta)` of scan `a` replaces the same
/// sector of scan `b`. `*out_n` receives the mixed size; if it exceeds `capacity`
/// nothing else is written and `ADVSEG_STATUS_BUFFER_TOO_SMALL` is returned.
/// `na + nb` points always suffice.
///
/// # Safety
/// Point buffers hold `4 * n` doubles, label buffers `n` values, outputs
/// `capacity` rows.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn advseg_polar_mix(
    a_points: *const f64,
    a_labels: *const u32,
    na: usize,
    b_points: *const f64,
    b_labels: *const u32,
    nb: usize,
    theta: f64,
    start: f64,
    out_points: *mut f64,
    out_labels: *mut u32,
    capacity: usize,
    out_n: *mut usize,
) -> AdvsegStatus {
    guard(|| {
        if out_n.is_null() {
            return Err(invalid("out_n is null"));
        }
        let a = LabeledScan::new(cloud_from(a_points, na)?, labels_from(a_labels, na)?.to_vec())?;
        let b = LabeledScan::new(cloud_from(b_points, nb)?, labels_from(b_labels, nb)?.to_vec())?;
        let mixed = augment::polar_mix(&a, &b, theta, start)?;
        *out_n = mixed.len();
        if mixed.len() > capacity {
            return Err(Fail::Status(
                AdvsegStatus::BufferTooSmall,
                format!("mixed scan has {} points, capacity {capacity}", mixed.len()),
            ));
        }
        if mixed.len() > 0 {
            if out_points.is_null() || out_labels.is_null() {
                return Err(invalid("output buffer is null"));
            }
            let pts = std::slice::from_raw_parts_mut(out_points, mixed.len() * 4);
            for (dst, src) in pts.chunks_exact_mut(4).zip(mixed.cloud.points()) {
                dst.copy_from_slice(src);
            }
            std::slice::from_raw_parts_mut(out_labels, mixed.len()).copy_from_slice(&mixed.labels);
        }
        Ok(())
    })
}

/// Mean IoU of `preds` against `truth` over `num_classes` classes. Classes absent
/// from both are skipped; `*out_defined` is 0 when no class is present.
///
/// # Safety
/// `preds` and `truth` hold `n` values; outputs are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn advseg_miou(
    preds: *const u32,
    truth: *const u32,
    n: usize,
    num_classes: usize,
    out_miou: *mut f64,
    out_defined: *mut i32,
) -> AdvsegStatus {
    guard(|| {
        if out_miou.is_null() || out_defined.is_null() {
            return Err(invalid("null output"));
        }
        if num_classes == 0 {
            return Err(invalid("num_classes must be positive"));
        }
        let mut cm = ConfusionMatrix::new(num_classes);
        cm.accumulate(labels_from(preds, n)?, labels_from(truth, n)?)?;
        let m = cm.miou(None, AbsentClassPolicy::Exclude);
        *out_miou = m.unwrap_or(0.0);
        *out_defined = i32::from(m.is_some());
        Ok(())
    })
}
