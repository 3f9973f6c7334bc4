//! C ABI over the `snet` checkpoint, dataset and inference API.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Every fallible call returns an [`SnetStatus`];
//! on failure the message is available from [`snet_last_error`] on the same
//! thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use snet::data::{load_idx, Dataset};
use snet::persist::{self, Model};
use snet::trainer::EvalReport;
use snet::{Error, Matrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnetStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Format = 3,
    Numeric = 4,
    Io = 5,
    Shape = 6,
    NullPointer = 7,
    InvalidString = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded checkpoint, either a single network or a SuperNet.
pub struct SnetModel {
    inner: Model,
}

/// A labelled dataset with features scaled to [0, 1].
pub struct SnetDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => SnetStatus::Config,
            Error::Data(_) => SnetStatus::Data,
            Error::Format { .. } | Error::CsvFormat { .. } => SnetStatus::Format,
            Error::Numeric(_) => SnetStatus::Numeric,
            Error::Io { .. } => SnetStatus::Io,
            Error::Shape(_) => SnetStatus::Shape,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SnetStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            SnetStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(SnetStatus::NullPointer, format!("{what} is null")))
}

fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(SnetStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: non-null and NUL-terminated by the C contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(SnetStatus::InvalidString, format!("{what} is not valid UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(SnetStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn input_matrix(model: &SnetModel, x: *const f64, rows: usize, cols: usize) -> Result<Matrix, Fail> {
    if cols != model.inner.input_dim() {
        return Err(Fail(SnetStatus::Shape, format!("input has {cols} columns, model expects {}", model.inner.input_dim())));
    }
    if rows == 0 {
        return Err(Fail(SnetStatus::Data, "input has no rows".to_string()));
    }
    out_ptr(x as *mut f64, "x")?;
    // SAFETY: caller guarantees `x` points to rows * cols readable doubles.
    let data = unsafe { std::slice::from_raw_parts(x, rows * cols) }.to_vec();
    Ok(Matrix::from_vec(rows, cols, data)?)
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn snet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn snet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn snet_model_load(path: *const c_char, out: *mut *mut SnetModel) -> SnetStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = path_arg(path, "path")?;
        let inner = persist::load(&path)?;
        *out = Box::into_raw(Box::new(SnetModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `snet_model_load`; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn snet_model_save(model: *const SnetModel, path: *const c_char) -> SnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let path = path_arg(path, "path")?;
        persist::save(&model.inner, &path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from `snet_model_load`, and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn snet_model_free(model: *mut SnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_model_input_dim(model: *const SnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_model_num_classes(model: *const SnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_model_param_count(model: *const SnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_count())
}

/// 1 for a SuperNet checkpoint, 0 for a single network or a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_model_is_supernet(model: *const SnetModel) -> i32 {
    model.as_ref().map_or(0, |m| matches!(m.inner, Model::SuperNet(_)) as i32)
}

/// Class probabilities for a row-major `rows x cols` batch, written row-major
/// into `out` which must hold `rows * num_classes` doubles.
///
/// # Safety
/// `x` must hold `rows * cols` doubles and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn snet_model_predict_proba(
    model: *const SnetModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> SnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let input = input_matrix(model, x, rows, cols)?;
        out_ptr(out, "out")?;
        let need = rows * model.inner.num_classes();
        if out_len < need {
            return Err(Fail(SnetStatus::BufferTooSmall, format!("out holds {out_len} values, {need} needed")));
        }
        let proba = model.inner.predict_proba(&input)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(proba.as_slice());
        Ok(())
    })
}

/// Predicted class per row, written into `out` which must hold `rows` entries.
///
/// # Safety
/// `x` must hold `rows * cols` doubles and `out` must hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn snet_model_predict(
    model: *const SnetModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut usize,
) -> SnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let input = input_matrix(model, x, rows, cols)?;
        out_ptr(out, "out")?;
        let classes = model.inner.predict_proba(&input)?.argmax_rows();
        std::slice::from_raw_parts_mut(out, rows).copy_from_slice(&classes);
        Ok(())
    })
}

/// Mean cross-entropy and accuracy of `model` on `dataset`.
///
/// # Safety
/// Handles must be live; `loss` and `accuracy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn snet_model_evaluate(
    model: *const SnetModel,
    dataset: *const SnetDataset,
    loss: *mut f64,
    accuracy: *mut f64,
) -> SnetStatus {
    guard(|| {
        let model = non_null(model, "model")?;
        let ds = &non_null(dataset, "dataset")?.inner;
        out_ptr(loss, "loss")?;
        out_ptr(accuracy, "accuracy")?;
        if ds.dim() != model.inner.input_dim() || ds.num_classes != model.inner.num_classes() {
            return Err(Fail(
                SnetStatus::Shape,
                format!(
                    "dataset is {}-dimensional with {} classes, model expects {} and {}",
                    ds.dim(),
                    ds.num_classes,
                    model.inner.input_dim(),
                    model.inner.num_classes()
                ),
            ));
        }
        let report = EvalReport::from_probabilities(model.inner.predict_proba(&ds.features)?, &ds.labels)?;
        *loss = report.loss;
        *accuracy = report.accuracy;
        Ok(())
    })
}

/// Loads an IDX image/label pair.
///
/// # Safety
/// Paths must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn snet_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut SnetDataset,
) -> SnetStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let images = path_arg(images, "images")?;
        let labels = path_arg(labels, "labels")?;
        let inner = load_idx(&images, &labels)?;
        *out = Box::into_raw(Box::new(SnetDataset { inner }));
        Ok(())
    })
}

/// Builds a dataset from row-major features and labels. Labels must be
/// below `num_classes`.
///
/// # Safety
/// `features` must hold `rows * cols` doubles, `labels` `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn snet_dataset_from_arrays(
    features: *const f64,
    labels: *const usize,
    rows: usize,
    cols: usize,
    num_classes: usize,
    out: *mut *mut SnetDataset,
) -> SnetStatus {
    guard(|| {
        out_ptr(out, "out")?;
        out_ptr(features as *mut f64, "features")?;
        out_ptr(labels as *mut usize, "labels")?;
        let x = Matrix::from_vec(rows, cols, std::slice::from_raw_parts(features, rows * cols).to_vec())?;
        let y = std::slice::from_raw_parts(labels, rows).to_vec();
        let inner = Dataset::new(x, y, num_classes, "ffi")?;
        *out = Box::into_raw(Box::new(SnetDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a live handle, and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn snet_dataset_free(dataset: *mut SnetDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_dataset_len(dataset: *const SnetDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn snet_dataset_dim(dataset: *const SnetDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.dim())
}
