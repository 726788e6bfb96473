//! C ABI over the `frfcn` models.
//!
//! Models live behind an opaque [`FrfcnModel`] handle. Every fallible call
//! returns an [`FrfcnStatus`]; on failure [`frfcn_last_error`] describes the
//! most recent error on the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use frfcn::models::{Model, ModelConfig, ModelKind, OUTPUT_SIZE};
use frfcn::training::{load_checkpoint, save_checkpoint};
use frfcn::{Error, Tensor};

/// Result of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrfcnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Corrupt = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct FrfcnModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> FrfcnStatus {
    match err {
        Error::Io(_) => FrfcnStatus::Io,
        Error::Corrupt { .. } | Error::KindMismatch { .. } => FrfcnStatus::Corrupt,
        Error::Shape(_) | Error::LengthMismatch { .. } => FrfcnStatus::Shape,
        Error::NonFinite(_) | Error::Diverged { .. } => FrfcnStatus::NonFinite,
        _ => FrfcnStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), (FrfcnStatus, String)>) -> FrfcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FrfcnStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FrfcnStatus::Panic
        }
    }
}

fn lib<T>(r: frfcn::Result<T>) -> Result<T, (FrfcnStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (FrfcnStatus, String) {
    (FrfcnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (FrfcnStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (FrfcnStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn model_mut<'a>(m: *mut FrfcnModel) -> Result<&'a mut FrfcnModel, (FrfcnStatus, String)> {
    m.as_mut().ok_or_else(|| null("model"))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn frfcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Builds a freshly initialised model. `kind` is one of `fcn`, `squeezefcn`,
/// `frfcn`, `baseline`; `height`/`width` give the frame size (0 keeps the
/// default 94x168).
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_build(
    kind: *const c_char,
    height: u32,
    width: u32,
    seed: u64,
    out: *mut *mut FrfcnModel,
) -> FrfcnStatus {
    guard(|| {
        if kind.is_null() {
            return Err(null("kind"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(kind)
            .to_str()
            .map_err(|_| (FrfcnStatus::InvalidArgument, "kind is not UTF-8".into()))?;
        let kind: ModelKind = lib(name.parse())?;
        let mut config = ModelConfig::default();
        if height > 0 {
            config.input_height = height as usize;
        }
        if width > 0 {
            config.input_width = width as usize;
        }
        let inner = lib(Model::build(kind, &config, seed))?;
        *out = Box::into_raw(Box::new(FrfcnModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by `frfcn train` or [`frfcn_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_load(path: *const c_char, out: *mut *mut FrfcnModel) -> FrfcnStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = lib(load_checkpoint(path))?.model;
        *out = Box::into_raw(Box::new(FrfcnModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_save(model: *mut FrfcnModel, path: *const c_char) -> FrfcnStatus {
    guard(|| {
        let m = model_mut(model)?;
        let path = path_arg(path)?;
        lib(save_checkpoint(&mut m.inner, path, None))
    })
}

/// Trainable scalar count.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_param_count(model: *const FrfcnModel, out: *mut u64) -> FrfcnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.count_params() as u64;
        Ok(())
    })
}

/// Floats per input sample: 6 stacked frames of `channels * height * width`
/// values in `[0, 1]`, oldest first.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_input_len(model: *const FrfcnModel, out: *mut usize) -> FrfcnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config().sample_len();
        Ok(())
    })
}

/// Eval-mode prediction for `batch` samples. `input` holds
/// `batch * input_len` floats; `output` receives `batch * 24` floats laid out
/// as `[batch][12 steps][steering, motor]`.
///
/// # Safety
/// The buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_predict(
    model: *mut FrfcnModel,
    input: *const f32,
    input_len: usize,
    batch: usize,
    output: *mut f32,
    output_len: usize,
) -> FrfcnStatus {
    guard(|| {
        let m = model_mut(model)?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let per = m.inner.config().sample_len();
        if batch == 0 || input_len != batch * per {
            return Err((
                FrfcnStatus::Shape,
                format!("input of {input_len} floats for batch {batch} of {per}"),
            ));
        }
        if output_len != batch * OUTPUT_SIZE {
            return Err((
                FrfcnStatus::Shape,
                format!("output of {output_len} floats, need {}", batch * OUTPUT_SIZE),
            ));
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = lib(Tensor::new(&m.inner.input_shape(batch), data))?;
        let saved = m.inner.mode();
        m.inner.set_mode(frfcn::layers::LayerMode::Eval);
        let y = m.inner.forward(&x);
        m.inner.set_mode(saved);
        let y = lib(y)?;
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn frfcn_model_free(model: *mut FrfcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Autonomy score `(t - 6n) / t`, clamped at zero.
#[no_mangle]
pub extern "C" fn frfcn_autonomy(seconds: f64, failures: u32) -> f64 {
    frfcn::metrics::autonomy(seconds, failures)
}
