//! C interface to the segmentation toolkit.
//!
//! Every function returns a [`SegadaptStatus`]. On failure a description is
//! kept per thread and can be read with [`segadapt_last_error`]. Models and
//! confusion matrices are opaque handles that the caller frees.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use segadapt::data::{patch_count, tile_grid, Normalization};
use segadapt::metrics::{self, ConfusionMatrix};
use segadapt::network::Registry;
use segadapt::train::{Checkpoint, CheckpointKind, ModelSegmenter, Segmenter, TrainState};
use segadapt::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegadaptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Checkpoint = 5,
    Runtime = 6,
    Panic = 7,
    /// The queried quantity is undefined (e.g. IoU of an absent class).
    Undefined = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Failure(SegadaptStatus, String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let status = match &err {
            Error::Io { .. } => SegadaptStatus::Io,
            Error::Data(_) | Error::Image { .. } | Error::Json(_) => SegadaptStatus::Data,
            Error::Checkpoint(_) => SegadaptStatus::Checkpoint,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::Config(_) | Error::Paradigm { .. } => {
                SegadaptStatus::InvalidArgument
            }
            _ => SegadaptStatus::Runtime,
        };
        Failure(status, err.to_string())
    }
}

impl From<candle_core::Error> for Failure {
    fn from(err: candle_core::Error) -> Self {
        Failure(SegadaptStatus::Runtime, err.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SegadaptStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(SegadaptStatus::InvalidArgument, message.into())
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SegadaptStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SegadaptStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            SegadaptStatus::Panic
        }
    }
}

fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller promises a valid, writable pointer when non-null.
    unsafe { ptr.as_mut() }.ok_or_else(|| null(what))
}

/// Description of the last failure on this thread, or null after a success.
/// The string stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn segadapt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segadapt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of full `patch x patch` windows on a `height x width` tile.
#[no_mangle]
pub extern "C" fn segadapt_tile_count(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
    out_count: *mut usize,
) -> SegadaptStatus {
    guard(|| {
        let out = out_ref(out_count, "out_count")?;
        *out = patch_count(height, width, patch, stride)?;
        Ok(())
    })
}

/// Row-major window offsets. Writes at most `capacity` entries into `rows`
/// and `cols` and stores the full count in `out_count`; a short buffer
/// yields `InvalidArgument` with `out_count` still set.
#[no_mangle]
pub extern "C" fn segadapt_tile_grid(
    height: usize,
    width: usize,
    patch: usize,
    stride: usize,
    rows: *mut usize,
    cols: *mut usize,
    capacity: usize,
    out_count: *mut usize,
) -> SegadaptStatus {
    guard(|| {
        let count = out_ref(out_count, "out_count")?;
        let grid = tile_grid(height, width, patch, stride)?;
        *count = grid.len();
        if grid.len() > capacity {
            return Err(invalid(format!("{} offsets do not fit in {capacity}", grid.len())));
        }
        if rows.is_null() {
            return Err(null("rows"));
        }
        if cols.is_null() {
            return Err(null("cols"));
        }
        // SAFETY: both buffers hold `capacity >= grid.len()` elements.
        let (rows, cols) = unsafe {
            (
                std::slice::from_raw_parts_mut(rows, grid.len()),
                std::slice::from_raw_parts_mut(cols, grid.len()),
            )
        };
        for (i, (r, c)) in grid.into_iter().enumerate() {
            rows[i] = r;
            cols[i] = c;
        }
        Ok(())
    })
}

enum Predictor {
    Model(Box<TrainState>),
    LabelEcho,
}

/// A loaded checkpoint ready for inference.
pub struct SegadaptModel {
    predictor: Predictor,
    normalization: Normalization,
    num_classes: usize,
    downsample: usize,
}

/// Load a checkpoint file. On success `*out_model` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn segadapt_model_load(
    path: *const c_char,
    out_model: *mut *mut SegadaptModel,
) -> SegadaptStatus {
    guard(|| {
        let out = out_ref(out_model, "out_model")?;
        if path.is_null() {
            return Err(null("path"));
        }
        // SAFETY: non-null and NUL-terminated per the contract.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| invalid("path is not valid UTF-8"))?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        let model = match ckpt.meta.kind {
            CheckpointKind::LabelEcho => SegadaptModel {
                predictor: Predictor::LabelEcho,
                normalization: ckpt.meta.normalization,
                num_classes: ckpt.meta.class_names.len(),
                downsample: 1,
            },
            CheckpointKind::Model => {
                let state = TrainState::from_checkpoint(&ckpt, &Registry::default())?;
                SegadaptModel {
                    normalization: ckpt.meta.normalization,
                    num_classes: state.config.num_classes,
                    downsample: state.config.downsample,
                    predictor: Predictor::Model(Box::new(state)),
                }
            }
        };
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// Release a model handle. Null is accepted.
///
/// # Safety
/// `model` must come from [`segadapt_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn segadapt_model_free(model: *mut SegadaptModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in segadapt_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn segadapt_model_num_classes(
    model: *const SegadaptModel,
    out_classes: *mut usize,
) -> SegadaptStatus {
    guard(|| {
        // SAFETY: live handle per the contract.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        *out_ref(out_classes, "out_classes")? = model.num_classes;
        Ok(())
    })
}

/// Image sides passed to [`segadapt_model_predict`] must be multiples of this.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn segadapt_model_size_multiple(
    model: *const SegadaptModel,
    out_multiple: *mut usize,
) -> SegadaptStatus {
    guard(|| {
        // SAFETY: live handle per the contract.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        *out_ref(out_multiple, "out_multiple")? = model.downsample;
        Ok(())
    })
}

/// Segment one channel-first RGB image (`3 * height * width` bytes) into
/// `height * width` class ids.
///
/// # Safety
/// `pixels` must hold `3 * height * width` bytes and `out_labels` room for
/// `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn segadapt_model_predict(
    model: *const SegadaptModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    out_labels: *mut u32,
) -> SegadaptStatus {
    guard(|| {
        // SAFETY: live handle per the contract.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out_labels.is_null() {
            return Err(null("out_labels"));
        }
        let plane = height
            .checked_mul(width)
            .filter(|&p| p > 0)
            .ok_or_else(|| invalid(format!("bad image size {height}x{width}")))?;
        let state = match &model.predictor {
            Predictor::Model(state) => state,
            Predictor::LabelEcho => {
                return Err(invalid("a label-echo checkpoint cannot segment images"));
            }
        };
        if height % model.downsample != 0 || width % model.downsample != 0 {
            return Err(invalid(format!(
                "image {height}x{width} is not a multiple of {}",
                model.downsample
            )));
        }
        // SAFETY: sizes checked above and guaranteed by the caller.
        let input = unsafe { std::slice::from_raw_parts(pixels, 3 * plane) };
        let images = model
            .normalization
            .image(input, height, width, state.config.dtype())?;
        let dummy = Tensor::zeros((1, height, width), DType::U32, &Device::Cpu)?;
        let segmenter = ModelSegmenter {
            ensemble: &state.ensemble,
            method: state.config.method,
            vote: state.config.vote,
        };
        let pred = segmenter
            .segment(&images, &dummy)?
            .to_dtype(DType::U32)?
            .flatten_all()?
            .to_vec1::<u32>()?;
        // SAFETY: room for `plane` values per the contract.
        unsafe { std::slice::from_raw_parts_mut(out_labels, plane) }.copy_from_slice(&pred);
        Ok(())
    })
}

/// Running confusion matrix.
pub struct SegadaptConfusion {
    inner: ConfusionMatrix,
}

/// New empty matrix for `num_classes` classes.
///
/// # Safety
/// `out_confusion` must be writable.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_new(
    num_classes: usize,
    out_confusion: *mut *mut SegadaptConfusion,
) -> SegadaptStatus {
    guard(|| {
        let out = out_ref(out_confusion, "out_confusion")?;
        if num_classes == 0 {
            return Err(invalid("at least one class is required"));
        }
        *out = Box::into_raw(Box::new(SegadaptConfusion {
            inner: ConfusionMatrix::new(num_classes),
        }));
        Ok(())
    })
}

/// Release a confusion handle. Null is accepted.
///
/// # Safety
/// `cm` must come from [`segadapt_confusion_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_free(cm: *mut SegadaptConfusion) {
    if !cm.is_null() {
        // SAFETY: created by Box::into_raw in segadapt_confusion_new.
        drop(unsafe { Box::from_raw(cm) });
    }
}

/// Add `len` prediction/label pairs; labels equal to `ignore_index` are
/// skipped. Nothing is added if any id is out of range.
///
/// # Safety
/// `prediction` and `label` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_accumulate(
    cm: *mut SegadaptConfusion,
    prediction: *const u32,
    label: *const u32,
    len: usize,
    ignore_index: u32,
) -> SegadaptStatus {
    guard(|| {
        // SAFETY: live handle per the contract.
        let cm = unsafe { cm.as_mut() }.ok_or_else(|| null("cm"))?;
        if len == 0 {
            return Ok(());
        }
        if prediction.is_null() {
            return Err(null("prediction"));
        }
        if label.is_null() {
            return Err(null("label"));
        }
        // SAFETY: both hold `len` values per the contract.
        let (pred, truth) = unsafe {
            (
                std::slice::from_raw_parts(prediction, len),
                std::slice::from_raw_parts(label, len),
            )
        };
        cm.inner.accumulate(pred, truth, ignore_index)?;
        Ok(())
    })
}

fn score(
    cm: *const SegadaptConfusion,
    out: *mut f64,
    f: impl FnOnce(&ConfusionMatrix) -> Result<Option<f64>, Failure>,
) -> SegadaptStatus {
    guard(|| {
        // SAFETY: live handle per the caller's contract.
        let cm = unsafe { cm.as_ref() }.ok_or_else(|| null("cm"))?;
        let out = out_ref(out, "out_value")?;
        match f(&cm.inner)? {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => Err(Failure(
                SegadaptStatus::Undefined,
                "score is undefined: the class never occurs in labels or predictions".into(),
            )),
        }
    })
}

fn check_class(cm: &ConfusionMatrix, class: usize) -> Result<(), Failure> {
    if class >= cm.num_classes() {
        return Err(invalid(format!("class {class} out of range 0..{}", cm.num_classes())));
    }
    Ok(())
}

/// IoU of one class; `Undefined` when the class never occurs.
///
/// # Safety
/// `cm` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_iou(
    cm: *const SegadaptConfusion,
    class: usize,
    out_value: *mut f64,
) -> SegadaptStatus {
    score(cm, out_value, |m| {
        check_class(m, class)?;
        Ok(metrics::iou(m, class))
    })
}

/// F1 of one class; `Undefined` when the class never occurs.
///
/// # Safety
/// `cm` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_f1(
    cm: *const SegadaptConfusion,
    class: usize,
    out_value: *mut f64,
) -> SegadaptStatus {
    score(cm, out_value, |m| {
        check_class(m, class)?;
        Ok(metrics::f1(m, class))
    })
}

/// Mean IoU over the classes that have a defined score.
///
/// # Safety
/// `cm` must be a live handle and `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn segadapt_confusion_miou(
    cm: *const SegadaptConfusion,
    out_value: *mut f64,
) -> SegadaptStatus {
    score(cm, out_value, |m| Ok(metrics::summarize(m, &[]).miou))
}
