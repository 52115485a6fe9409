//! C ABI for loading a trained checkpoint, scoring RGB images and computing AUROC.
//!
//! Every fallible function returns a [`SpaceStatus`]. On failure the message
//! is available from [`space_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with [`space_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use space_core::checkpoint;
use space_core::imaging::PixelImage;
use space_core::metrics::auroc;
use space_core::scoring::{score_image, Model};
use space_core::SpaceError;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad input: unreadable or incompatible checkpoint, missing calibration.
    Config = 2,
    /// Arguments that break an operation's contract (sizes, empty inputs, NaN).
    InvalidArgument = 3,
    Io = 4,
    /// Any other failure, including a caught panic.
    Internal = 5,
}

/// A loaded model. Opaque to C.
pub struct SpaceModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &SpaceError) -> SpaceStatus {
    match e {
        SpaceError::Config(_) | SpaceError::Format { .. } => SpaceStatus::Config,
        SpaceError::Contract(_) => SpaceStatus::InvalidArgument,
        SpaceError::Io { .. } | SpaceError::Item { .. } => SpaceStatus::Io,
        SpaceError::NonFinite { .. } => SpaceStatus::Internal,
    }
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (SpaceStatus, String)>) -> SpaceStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpaceStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpaceStatus::Internal
        }
    }
}

fn lift(e: SpaceError) -> (SpaceStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SpaceStatus, String) {
    (SpaceStatus::NullArgument, format!("{what} must not be null"))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn space_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn space_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint written by `space train`. The model must be calibrated
/// before it can score.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn space_model_load(path: *const c_char, out: *mut *mut SpaceModel) -> SpaceStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination
        let p = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| (SpaceStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let ck = checkpoint::load(Path::new(p)).map_err(lift)?;
        let handle = Box::new(SpaceModel { model: ck.model });
        // SAFETY: checked non-null
        unsafe { *out = Box::into_raw(handle) };
        Ok(())
    })
}

/// Release a handle from [`space_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`space_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn space_model_free(model: *mut SpaceModel) {
    if !model.is_null() {
        // SAFETY: ownership returns from the pointer handed out at load
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Side length the networks resize every image to.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn space_model_input_size(model: *const SpaceModel, out: *mut u32) -> SpaceStatus {
    guard(|| {
        // SAFETY: null-checked; caller guarantees a live handle
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null
        unsafe { *out = m.model.nets.config.input_size as u32 };
        Ok(())
    })
}

/// Whether the model carries calibration statistics (1) or not (0).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn space_model_is_calibrated(model: *const SpaceModel, out: *mut u8) -> SpaceStatus {
    guard(|| {
        // SAFETY: null-checked; caller guarantees a live handle
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null
        unsafe { *out = m.model.calibration.is_some() as u8 };
        Ok(())
    })
}

/// Score an interleaved 8-bit RGB image of `width × height` pixels (rows
/// top to bottom, no padding).
///
/// Writes the image score to `score_out`. When `map_out` is non-null it
/// receives the `height × width` total anomaly map in row-major order.
///
/// # Safety
/// `rgb` must hold `3·width·height` bytes, `map_out` (if non-null) room for
/// `width·height` floats, and `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn space_score_rgb(
    model: *const SpaceModel,
    rgb: *const u8,
    width: u32,
    height: u32,
    score_out: *mut f32,
    map_out: *mut f32,
) -> SpaceStatus {
    guard(|| {
        // SAFETY: null-checked; caller guarantees a live handle
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if score_out.is_null() {
            return Err(null("score_out"));
        }
        if width == 0 || height == 0 {
            return Err((SpaceStatus::InvalidArgument, format!("image size {width}x{height} is empty")));
        }
        let (w, h) = (width as usize, height as usize);
        // SAFETY: caller guarantees 3·w·h readable bytes
        let bytes = unsafe { std::slice::from_raw_parts(rgb, 3 * w * h) };
        let img = PixelImage::from_rgb_bytes(h, w, bytes)
            .ok_or_else(|| (SpaceStatus::InvalidArgument, "pixel buffer does not match image size".to_string()))?;
        let scored = score_image(&m.model, &img).map_err(lift)?;
        // SAFETY: checked non-null
        unsafe { *score_out = scored.score };
        if !map_out.is_null() {
            // SAFETY: caller guarantees room for w·h floats
            let dst = unsafe { std::slice::from_raw_parts_mut(map_out, w * h) };
            dst.copy_from_slice(&scored.total.values);
        }
        Ok(())
    })
}

/// Probability that an anomalous score exceeds a normal one, ties counted half.
///
/// # Safety
/// `normal` and `anomalous` must hold `n_normal` and `n_anomalous` doubles.
#[no_mangle]
pub unsafe extern "C" fn space_auroc(
    normal: *const f64,
    n_normal: usize,
    anomalous: *const f64,
    n_anomalous: usize,
    out: *mut f64,
) -> SpaceStatus {
    guard(|| {
        if normal.is_null() || anomalous.is_null() || out.is_null() {
            return Err(null("score arrays and out"));
        }
        // SAFETY: caller guarantees the lengths
        let (n, a) = unsafe {
            (
                std::slice::from_raw_parts(normal, n_normal),
                std::slice::from_raw_parts(anomalous, n_anomalous),
            )
        };
        let v = auroc(n, a).map_err(lift)?;
        // SAFETY: checked non-null
        unsafe { *out = v };
        Ok(())
    })
}
