//! C ABI over the forgeryscope detector.
//!
//! Every fallible call returns an [`FsStatus`]. On failure a description is
//! kept per thread and can be read with [`fs_last_error_message`]. Models are
//! opaque heap handles released with [`fs_model_free`]. No panic crosses the
//! boundary: it is caught and reported as [`FsStatus::FsPanic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use forgeryscope::branch::low::dct8x8;
use forgeryscope::eval::auc_roc;
use forgeryscope::fusion::{decode_checkpoint, load_checkpoint, CheckpointError, ForwardOptions, Model, FORGERY_TYPES};
use forgeryscope::image::{resize_bilinear, resize_plane, ImagePlane, ImageRGB};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FsStatus {
    FsOk = 0,
    /// A required pointer was null.
    FsNullPointer = 1,
    /// An argument was out of range or inconsistent with another.
    FsInvalidArgument = 2,
    /// A file could not be read.
    FsIo = 3,
    /// Checkpoint bytes were corrupt or incompatible.
    FsCheckpoint = 4,
    /// The library failed for a reason not caused by the arguments.
    FsInternal = 5,
    FsPanic = 6,
}

/// A loaded model.
pub struct FsModel {
    model: Model,
}

/// Image-level prediction.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct FsVerdict {
    /// Probability that the image is manipulated.
    pub p_fake: f64,
    /// Index of the most likely manipulation type; see `fs_forgery_type_name`.
    pub forgery_type: u32,
    pub p_type: f64,
    pub is_fake: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FsStatus, String);

fn set_error(msg: String) {
    // Interior NULs would truncate the C string; replace them.
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FsStatus::FsOk
        }
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
            FsStatus::FsPanic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FsStatus::FsNullPointer, format!("{what} is null"))
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure(FsStatus::FsInvalidArgument, msg.to_string())
}

fn checkpoint_failure(e: CheckpointError) -> Failure {
    let status = match e {
        CheckpointError::Io { .. } => FsStatus::FsIo,
        _ => FsStatus::FsCheckpoint,
    };
    Failure(status, e.to_string())
}

/// Builds a slice from a C pointer, allowing null only when `len` is 0.
///
/// # Safety
/// A non-null `ptr` must be valid for `len` reads of `T`.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

fn publish(out: *mut *mut FsModel, model: Model) {
    // SAFETY: callers check `out` for null before loading.
    unsafe { *out = Box::into_raw(Box::new(FsModel { model })) };
}

/// Message describing the last failed call on this thread, or null after a
/// success. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Number of manipulation types, index 0 being authentic.
#[no_mangle]
pub extern "C" fn fs_forgery_type_count() -> u32 {
    FORGERY_TYPES.len() as u32
}

/// Static name of manipulation type `index`, or null when out of range.
#[no_mangle]
pub extern "C" fn fs_forgery_type_name(index: u32) -> *const c_char {
    const NAMES: [&CStr; 7] = [
        c"real",
        c"copy-move",
        c"splicing",
        c"retouching",
        c"gan",
        c"diffusion",
        c"deepfake",
    ];
    NAMES.get(index as usize).map_or(ptr::null(), |s| s.as_ptr())
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(path: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = load_checkpoint(path).map_err(checkpoint_failure)?;
        publish(out, model);
        Ok(())
    })
}

/// Decodes checkpoint bytes into a new handle stored in `*out`.
///
/// # Safety
/// `data` must be valid for `len` bytes and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fs_model_from_bytes(data: *const u8, len: usize, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = slice(data, len, "data")?;
        let model = decode_checkpoint(bytes).map_err(checkpoint_failure)?;
        publish(out, model);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square input the model works on, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_model_input_size(model: *const FsModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().image_size)
}

/// Classifies an interleaved 8-bit RGB image of any size.
///
/// The image is resized to the model input. When `mask` is non-null it
/// receives `width * height` manipulation probabilities in row-major order,
/// and `mask_len` must equal that count.
///
/// # Safety
/// `pixels` must hold `3 * width * height` bytes, `verdict` must be valid for
/// one write and a non-null `mask` valid for `mask_len` writes.
#[no_mangle]
pub unsafe extern "C" fn fs_analyze_rgb(
    model: *const FsModel,
    pixels: *const u8,
    width: usize,
    height: usize,
    verdict: *mut FsVerdict,
    mask: *mut f64,
    mask_len: usize,
) -> FsStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if verdict.is_null() {
            return Err(null("verdict"));
        }
        let n = width.checked_mul(height).and_then(|n| n.checked_mul(3)).ok_or_else(|| invalid("image too large"))?;
        if n == 0 {
            return Err(invalid("image has no pixels"));
        }
        if !mask.is_null() && mask_len != width * height {
            return Err(invalid(format!("mask_len {mask_len} != {width}*{height}")));
        }
        let img = ImageRGB::new(width, height, slice(pixels, n, "pixels")?.to_vec()).map_err(invalid)?;
        let size = model.config().image_size;
        let input = if (width, height) == (size, size) {
            img
        } else {
            resize_bilinear(&img, size, size).map_err(invalid)?
        };
        let feats = model.extract(&input).map_err(|e| Failure(FsStatus::FsInternal, e.to_string()))?;
        let o = model
            .predict(&[&feats], &ForwardOptions::default())
            .map_err(|e| Failure(FsStatus::FsInternal, e.to_string()))?
            .remove(0);
        let t = o.predicted_type();
        *verdict = FsVerdict {
            p_fake: o.p_fake(),
            forgery_type: t as u32,
            p_type: o.type_hat[t],
            is_fake: o.p_fake() >= 0.5,
        };
        if !mask.is_null() {
            let up: ImagePlane = resize_plane(&o.mask_hat, width, height).map_err(invalid)?;
            std::slice::from_raw_parts_mut(mask, mask_len).copy_from_slice(up.values());
        }
        Ok(())
    })
}

/// Unnormalized 2-D DCT-II of one row-major 8x8 block; a constant block of
/// ones has DC coefficient 64.
///
/// # Safety
/// `block` must hold 64 readable and `out` 64 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fs_block_dct_8x8(block: *const f64, out: *mut f64) -> FsStatus {
    guard(|| {
        let input = slice(block, 64, "block")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let block: &[f64; 64] = input.try_into().expect("64 elements");
        std::slice::from_raw_parts_mut(out, 64).copy_from_slice(&dct8x8(block));
        Ok(())
    })
}

/// Area under the ROC curve of `scores` against 0/1 `labels`, ties counting half.
///
/// # Safety
/// `scores` and `labels` must hold `n` elements and `out` be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn fs_auc_roc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let scores = slice(scores, n, "scores")?;
        let labels = slice(labels, n, "labels")?;
        *out = auc_roc(scores, labels).map_err(invalid)?;
        Ok(())
    })
}
