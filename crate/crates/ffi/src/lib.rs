//! C ABI over the segmentation engine: load a checkpoint, segment a slice and
//! read back its built-in attention maps.
//!
//! Every function returns a [`SaunetStatus`]; on failure the message is kept
//! per thread and read with [`saunet_last_error`]. Models are opaque handles
//! owned by the caller and released with [`saunet_model_free`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use saunet::autograd::{Mode, Tape};
use saunet::data::{Plane, SegSample, TARGET_SPACING};
use saunet::interpret::{extract, resize_bilinear};
use saunet::model::SaUNet;
use saunet::tensor::{LabelMap, Tensor};
use saunet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    NonFinite = 7,
    /// The requested map does not exist in this model (no shape stream).
    Unavailable = 8,
    Panic = 9,
}

/// Attention maps accepted by [`saunet_attention_map`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaunetMap {
    Alpha1 = 0,
    Alpha2 = 1,
    Alpha3 = 2,
    SpatialD2 = 3,
    SpatialD3 = 4,
    Shape = 5,
}

impl SaunetMap {
    fn from_raw(v: u32) -> Option<Self> {
        use SaunetMap::*;
        [Alpha1, Alpha2, Alpha3, SpatialD2, SpatialD3, Shape].get(v as usize).copied()
    }
}

/// Opaque model handle.
pub struct SaunetModel {
    inner: SaUNet<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SaunetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => SaunetStatus::Shape,
            Error::InvalidArgument(_) | Error::Data(_) => SaunetStatus::InvalidArgument,
            Error::Format { .. } => SaunetStatus::Format,
            Error::NonFinite(_) => SaunetStatus::NonFinite,
            Error::UninitializedRunningStats(_) | Error::Config(_) => SaunetStatus::Config,
            Error::Io { .. } => SaunetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: SaunetStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Runs `f`, records its error message and converts panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SaunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            SaunetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(Some(format!("internal panic: {msg}")));
            SaunetStatus::Panic
        }
    }
}

fn model_ref<'a>(model: *const SaunetModel) -> Result<&'a SaUNet<f32>, Failure> {
    // SAFETY: non-null handles come from saunet_model_load and are not yet freed.
    unsafe { model.as_ref() }
        .map(|m| &m.inner)
        .ok_or_else(|| fail(SaunetStatus::NullPointer, "model handle is null"))
}

/// Validates the raw slice and derives the network inputs from it.
fn prepare(image: *const f32, height: usize, width: usize) -> Result<SegSample, Failure> {
    if image.is_null() {
        return Err(fail(SaunetStatus::NullPointer, "image pointer is null"));
    }
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(fail(
            SaunetStatus::Shape,
            format!("slice must be a positive multiple of 8 on each side, got {height}x{width}"),
        ));
    }
    let len = height
        .checked_mul(width)
        .ok_or_else(|| fail(SaunetStatus::Shape, "slice size overflows"))?;
    // SAFETY: the caller guarantees `image` points to height·width floats.
    let data = unsafe { std::slice::from_raw_parts(image, len) }.to_vec();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fail(SaunetStatus::NonFinite, format!("image value {i} is not finite")));
    }
    let plane = Plane::new(height, width, data)?;
    Ok(SegSample::finalize("ffi", &plane, LabelMap::filled(height, width, 0), TARGET_SPACING))
}

fn batch_of_one(t: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec()).expect("same numel")
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn saunet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn saunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint (and its `.json` config sidecar) into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_load(path: *const c_char, out: *mut *mut SaunetModel) -> SaunetStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(SaunetStatus::NullPointer, "path or out pointer is null"));
        }
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| fail(SaunetStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let (inner, _) = SaUNet::<f32>::load(Path::new(path))?;
        // SAFETY: checked non-null; the caller guarantees it is writable.
        unsafe { *out = Box::into_raw(Box::new(SaunetModel { inner })) };
        Ok(())
    })
}

/// Releases a handle from [`saunet_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a live handle, and is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_free(model: *mut SaunetModel) {
    if !model.is_null() {
        // SAFETY: the handle was created by Box::into_raw in saunet_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of output classes, background included.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_num_classes(model: *const SaunetModel, out: *mut u32) -> SaunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(fail(SaunetStatus::NullPointer, "out pointer is null"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = m.config().num_classes as u32 };
        Ok(())
    })
}

/// Whether the model has the gated shape stream (and so α and shape maps).
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn saunet_model_has_shape_stream(model: *const SaunetModel, out: *mut bool) -> SaunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(fail(SaunetStatus::NullPointer, "out pointer is null"));
        }
        // SAFETY: checked non-null.
        unsafe { *out = m.config().shape_stream };
        Ok(())
    })
}

/// Segments one raw `height×width` slice (row-major, already at the model's
/// pixel spacing, sides multiples of 8) into per-pixel class labels.
///
/// # Safety
/// `image` must hold `height·width` floats and `labels` room for as many bytes.
#[no_mangle]
pub unsafe extern "C" fn saunet_segment(
    model: *const SaunetModel,
    image: *const f32,
    height: usize,
    width: usize,
    labels: *mut u8,
) -> SaunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let sample = prepare(image, height, width)?;
        if labels.is_null() {
            return Err(fail(SaunetStatus::NullPointer, "labels pointer is null"));
        }
        let tape = Tape::no_grad();
        let canny = m.config().shape_stream.then(|| batch_of_one(&sample.canny));
        let pass = m.forward(&tape, &batch_of_one(&sample.image), canny.as_ref(), Mode::Eval)?;
        let map = LabelMap::argmax(&pass.out.seg_logits.value(), 0)?;
        // SAFETY: the caller guarantees room for height·width bytes.
        unsafe { std::slice::from_raw_parts_mut(labels, height * width) }.copy_from_slice(&map.data);
        Ok(())
    })
}

/// Writes one attention map (a [`SaunetMap`] value) of the slice into `out`,
/// bilinearly resized to `height×width`. Values lie in [0, 1].
///
/// # Safety
/// `image` must hold `height·width` floats and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn saunet_attention_map(
    model: *const SaunetModel,
    image: *const f32,
    height: usize,
    width: usize,
    which: u32,
    out: *mut f32,
) -> SaunetStatus {
    guard(|| {
        let m = model_ref(model)?;
        let which = SaunetMap::from_raw(which)
            .ok_or_else(|| fail(SaunetStatus::InvalidArgument, format!("unknown attention map {which}")))?;
        let sample = prepare(image, height, width)?;
        if out.is_null() {
            return Err(fail(SaunetStatus::NullPointer, "out pointer is null"));
        }
        let bundle = extract(m, &sample)?;
        let missing = || fail(SaunetStatus::Unavailable, format!("{which:?} needs the shape stream"));
        let map = match which {
            SaunetMap::Alpha1 => bundle.alphas.first().ok_or_else(missing)?,
            SaunetMap::Alpha2 => bundle.alphas.get(1).ok_or_else(missing)?,
            SaunetMap::Alpha3 => bundle.alphas.get(2).ok_or_else(missing)?,
            SaunetMap::SpatialD2 => bundle.spatial_d2(),
            SaunetMap::SpatialD3 => bundle.spatial_d3(),
            SaunetMap::Shape => bundle.shape_map.as_ref().ok_or_else(missing)?,
        };
        let plane = resize_bilinear(&Plane::from_tensor(map)?, height, width);
        // SAFETY: the caller guarantees room for height·width floats.
        unsafe { std::slice::from_raw_parts_mut(out, height * width) }.copy_from_slice(&plane.data);
        Ok(())
    })
}
