//! C ABI for loading an a3sn checkpoint and classifying (text, aspect) pairs.
//!
//! Every fallible function returns an [`A3snStatus`]; on failure the message
//! is available from [`a3sn_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use a3sn::checkpoint::{load_params, Checkpoint};
use a3sn::encoding::{encode, EncodedInput, Example, Polarity};
use a3sn::layer::{cross_mass, AblationMode};
use a3sn::model::{forward, Prediction};
use a3sn::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum A3snStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Data = 4,
    Checkpoint = 5,
    Config = 6,
    Numeric = 7,
    OutOfRange = 8,
    Panic = 9,
}

/// Opaque loaded model.
pub struct A3snModel {
    ckpt: Checkpoint,
    mode: AblationMode,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(A3snStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => A3snStatus::Io,
            Error::Data(_) | Error::Encoding(_) | Error::EmptyInput(_) => A3snStatus::Data,
            Error::Checkpoint(_) => A3snStatus::Checkpoint,
            Error::Config(_) => A3snStatus::Config,
            Error::Numeric(_) | Error::Autograd(_) | Error::Dimension { .. } | Error::Contract(_) => {
                A3snStatus::Numeric
            }
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> A3snStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => A3snStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            A3snStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(A3snStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(A3snStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(m: *const A3snModel) -> Result<&'a A3snModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn checkpoint_mode(ckpt: &Checkpoint) -> Result<AblationMode, Error> {
    match ckpt.meta.lines().find_map(|l| l.strip_prefix("mode=")) {
        Some(m) => m.trim().parse(),
        None => Ok(AblationMode::Full),
    }
}

impl A3snModel {
    fn encode(&self, text: &str, aspect: &str) -> Result<EncodedInput, Error> {
        let ex = Example::from_text(text, aspect, Polarity::Neutral)?;
        Ok(encode(&ex, &self.ckpt.vocab, self.ckpt.config.max_len)?.trimmed())
    }

    fn predict(&self, enc: &EncodedInput) -> Result<Prediction, Error> {
        forward(enc, &self.ckpt.params, &self.ckpt.config, self.mode)
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn a3sn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next a3sn call on the same thread.
#[no_mangle]
pub extern "C" fn a3sn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a model that must be
/// released with [`a3sn_model_free`].
///
/// # Safety
/// `path` must be NULL or a NUL-terminated string; `out` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn a3sn_model_load(path: *const c_char, out: *mut *mut A3snModel) -> A3snStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let ckpt = load_params(path)?;
        let mode = checkpoint_mode(&ckpt)?;
        *out = Box::into_raw(Box::new(A3snModel { ckpt, mode }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`a3sn_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn a3sn_model_free(model: *mut A3snModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of attention layers and heads per layer.
///
/// # Safety
/// Pointers must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn a3sn_model_shape(
    model: *const A3snModel,
    layers: *mut usize,
    heads: *mut usize,
) -> A3snStatus {
    guard(|| {
        let m = model_arg(model)?;
        if layers.is_null() || heads.is_null() {
            return Err(null("output"));
        }
        *layers = m.ckpt.config.layers;
        *heads = m.ckpt.config.layer.heads;
        Ok(())
    })
}

/// Classifies `text` with respect to `aspect`. Writes positive, negative and
/// neutral probabilities to `probs[0..3]` and the argmax (0, 1 or 2) to
/// `*label`.
///
/// # Safety
/// Strings must be NUL-terminated; `probs` must hold 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn a3sn_model_predict(
    model: *const A3snModel,
    text: *const c_char,
    aspect: *const c_char,
    probs: *mut f64,
    label: *mut i32,
) -> A3snStatus {
    guard(|| {
        let m = model_arg(model)?;
        let text = str_arg(text, "text")?;
        let aspect = str_arg(aspect, "aspect")?;
        if probs.is_null() || label.is_null() {
            return Err(null("output"));
        }
        let pred = m.predict(&m.encode(text, aspect)?)?;
        ptr::copy_nonoverlapping(pred.probs.as_ptr(), probs, 3);
        *label = pred.predicted.id() as i32;
        Ok(())
    })
}

/// Attention mass that one head puts on sentence/aspect cross pairs, before
/// and after amplification.
///
/// # Safety
/// Strings must be NUL-terminated; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn a3sn_model_cross_mass(
    model: *const A3snModel,
    text: *const c_char,
    aspect: *const c_char,
    layer: usize,
    head: usize,
    original: *mut f64,
    amplified: *mut f64,
) -> A3snStatus {
    guard(|| {
        let m = model_arg(model)?;
        let text = str_arg(text, "text")?;
        let aspect = str_arg(aspect, "aspect")?;
        if original.is_null() || amplified.is_null() {
            return Err(null("output"));
        }
        let cfg = &m.ckpt.config;
        if layer >= cfg.layers || head >= cfg.layer.heads {
            return Err(Fail(
                A3snStatus::OutOfRange,
                format!("layer {layer}/head {head} outside {}x{}", cfg.layers, cfg.layer.heads),
            ));
        }
        let enc = m.encode(text, aspect)?;
        let pred = m.predict(&enc)?;
        let h = &pred.traces[layer].heads[head];
        *original = cross_mass(&h.score_ori, &enc.amplify);
        *amplified = cross_mass(&h.score_amp, &enc.amplify);
        Ok(())
    })
}
