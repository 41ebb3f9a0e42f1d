//! C ABI for segcore.
//!
//! Every function returns a [`SegStatus`]. On failure a description is kept
//! per thread and can be read with [`seg_last_error`]. Models are opaque
//! [`SegModel`] handles released with [`seg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use segcore::arch::{load_checkpoint, save_checkpoint, ArchitectureSpec, Family, Model};
use segcore::data::generate_synthetic;
use segcore::loss::dice_coefficient;
use segcore::metrics::{quadratic_kappa_with, ConfusionMatrix};
use segcore::{SegError, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    LabelRange = 6,
    Undefined = 7,
    NonFinite = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Opaque model handle.
pub struct SegModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(SegStatus, String);

impl From<SegError> for Fail {
    fn from(e: SegError) -> Self {
        let status = match &e {
            SegError::ShapeMismatch { .. } | SegError::InvalidShape { .. } => SegStatus::Shape,
            SegError::InvalidArgument(_) | SegError::NotOnTape | SegError::NonScalarLoss(_) => {
                SegStatus::InvalidArgument
            }
            SegError::MissingGradient(_) | SegError::GradCheckFailed(_) => SegStatus::InvalidArgument,
            SegError::NonFinite(_) => SegStatus::NonFinite,
            SegError::LabelRange { .. } => SegStatus::LabelRange,
            SegError::Undefined(_) => SegStatus::Undefined,
            SegError::Format { .. } => SegStatus::Format,
            SegError::Io { .. } => SegStatus::Io,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SegStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SegStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SegStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const SegModel) -> Result<&'a Model, Fail> {
    m.as_ref().map(|h| &h.model).ok_or_else(|| null("model"))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn seg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model. `family` is one of unet, resunet, segnet, fcn8, fcn16,
/// fcn32; `depth` 0 selects the family default.
///
/// # Safety
/// `family` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seg_model_build(
    family: *const c_char,
    depth: usize,
    base_filters: usize,
    num_classes: usize,
    input_size: usize,
    seed: u64,
    out: *mut *mut SegModel,
) -> SegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let family: Family = str_arg(family, "family")?.parse()?;
        let mut spec = ArchitectureSpec::new(family)
            .with_base_filters(base_filters)
            .with_classes(num_classes)
            .with_input_size(input_size);
        if depth != 0 {
            spec = spec.with_depth(depth);
        }
        let model = Model::build(&spec, seed)?;
        *out = Box::into_raw(Box::new(SegModel { model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seg_model_load(path: *const c_char, out: *mut *mut SegModel) -> SegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SegModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn seg_model_save(model: *const SegModel, path: *const c_char) -> SegStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(m, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn seg_model_free(model: *mut SegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes input channels, class count, input size and trainable parameter
/// count; any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn seg_model_info(
    model: *const SegModel,
    in_channels: *mut usize,
    num_classes: *mut usize,
    input_size: *mut usize,
    parameters: *mut usize,
) -> SegStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.spec();
        for (p, v) in [
            (in_channels, s.in_channels),
            (num_classes, s.num_classes),
            (input_size, s.input_size),
            (parameters, m.parameter_count()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

unsafe fn image_arg(m: &Model, image: *const f64, height: usize, width: usize) -> Result<Tensor, Fail> {
    if image.is_null() {
        return Err(null("image"));
    }
    let c = m.spec().in_channels;
    let data = std::slice::from_raw_parts(image, c * height * width).to_vec();
    Ok(Tensor::new(Shape::new(1, c, height, width), data)?)
}

fn need(len: usize, have: usize, what: &str) -> Result<(), Fail> {
    if have < len {
        return Err(Fail(
            SegStatus::BufferTooSmall,
            format!("{what} holds {have} values, {len} needed"),
        ));
    }
    Ok(())
}

/// Channel-softmax probabilities for one planar `(c, h, w)` image.
/// `out` receives `num_classes · h · w` values, class-major.
///
/// # Safety
/// `image` must hold `in_channels · height · width` doubles and `out`
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn seg_model_probabilities(
    model: *const SegModel,
    image: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> SegStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        need(m.spec().num_classes * height * width, out_len, "out")?;
        let probs = m.predict(&image_arg(m, image, height, width)?)?;
        std::slice::from_raw_parts_mut(out, probs.numel()).copy_from_slice(probs.data());
        Ok(())
    })
}

/// Per-pixel argmax labels, row-major `h · w` bytes.
///
/// # Safety
/// As [`seg_model_probabilities`], with `labels` holding `labels_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn seg_model_predict(
    model: *const SegModel,
    image: *const f64,
    height: usize,
    width: usize,
    labels: *mut u8,
    labels_len: usize,
) -> SegStatus {
    guard(|| {
        let m = model_ref(model)?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        need(height * width, labels_len, "labels")?;
        let pred = m.predict_labels(&image_arg(m, image, height, width)?)?;
        std::slice::from_raw_parts_mut(labels, height * width).copy_from_slice(pred.labels());
        Ok(())
    })
}

/// Quadratic-weighted kappa of a row-major `k × k` confusion matrix
/// (rows truth, columns prediction).
///
/// # Safety
/// `counts` must hold `k · k` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn seg_quadratic_kappa(
    counts: *const u64,
    k: usize,
    exclude_background: bool,
    out: *mut f64,
) -> SegStatus {
    guard(|| {
        if counts.is_null() || out.is_null() {
            return Err(null("counts/out"));
        }
        let cm = ConfusionMatrix::from_counts(k, std::slice::from_raw_parts(counts, k * k).to_vec())?;
        *out = quadratic_kappa_with(&cm, exclude_background)?;
        Ok(())
    })
}

/// Smoothed Dice coefficient of two equally long planes.
///
/// # Safety
/// `p` and `g` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn seg_dice_coefficient(p: *const f64, g: *const f64, len: usize, out: *mut f64) -> SegStatus {
    guard(|| {
        if p.is_null() || g.is_null() || out.is_null() {
            return Err(null("p/g/out"));
        }
        let (p, g) = (std::slice::from_raw_parts(p, len), std::slice::from_raw_parts(g, len));
        *out = dice_coefficient(p, g)?;
        Ok(())
    })
}

/// Writes a synthetic dataset and `manifest.tsv` under `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn seg_synth_generate(dir: *const c_char, count: usize, size: usize, seed: u64) -> SegStatus {
    guard(|| {
        generate_synthetic(&PathBuf::from(str_arg(dir, "dir")?), count, size, seed)?;
        Ok(())
    })
}
