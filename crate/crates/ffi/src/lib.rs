//! C interface to the recognition pipeline.
//!
//! Every function returns an [`EspStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`esp_last_error`]. Objects are
//! opaque handles created by `*_load`/`*_new` and released with `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use esppct::config::PipelineConfig;
use esppct::cost::{count_flops, count_params, InputShape};
use esppct::pipeline::EspPct;
use esppct::pointcloud::{load_sequence, write_sequence, Frame, Point, Sequence, POINT_FEATURES};
use esppct::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EspStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration or argument value.
    InvalidConfig = 3,
    /// File, format or dataset problem.
    Data = 4,
    /// Non-finite values or a failed numeric check.
    Numeric = 5,
    /// A panic was caught at the boundary.
    Internal = 6,
}

/// A point-cloud sequence.
pub struct EspSequence {
    inner: Sequence,
}

/// A trained model.
pub struct EspModel {
    inner: EspPct,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> EspStatus {
    match err.exit_code() {
        1 => EspStatus::InvalidConfig,
        3 => EspStatus::Numeric,
        _ => EspStatus::Data,
    }
}

struct Fail(EspStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let msg = std::iter::successors(Some(&e as &dyn std::error::Error), |e| e.source())
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(": ");
        Fail(status_of(&e), msg)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EspStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            EspStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(EspStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EspStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is null or points to a live object created by this library.
unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out<T>(p: *mut T, what: &str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(null(what))
    } else {
        Ok(p)
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn esp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates an empty, unlabeled sequence.
///
/// # Safety
/// `out_seq` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_new(out_seq: *mut *mut EspSequence) -> EspStatus {
    guard(|| {
        let o = out(out_seq, "out_seq")?;
        *o = Box::into_raw(Box::new(EspSequence {
            inner: Sequence::default(),
        }));
        Ok(())
    })
}

/// Reads a sequence file.
///
/// # Safety
/// `path` is a NUL-terminated string and `out_seq` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_load(path: *const c_char, out_seq: *mut *mut EspSequence) -> EspStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let o = out(out_seq, "out_seq")?;
        let inner = load_sequence(path)?;
        *o = Box::into_raw(Box::new(EspSequence { inner }));
        Ok(())
    })
}

/// Writes a sequence file.
///
/// # Safety
/// `seq` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_write(seq: *const EspSequence, path: *const c_char) -> EspStatus {
    guard(|| {
        let seq = obj(seq, "seq")?;
        let path = str_arg(path, "path")?;
        Ok(write_sequence(&seq.inner, path)?)
    })
}

/// Appends a frame of `n_points` points. `points` holds `5 * n_points`
/// doubles, each point as x, y, z, velocity, intensity. Timestamps must
/// strictly increase across frames.
///
/// # Safety
/// `seq` comes from this library; `points` is readable for `5 * n_points`
/// doubles (it may be null when `n_points` is 0).
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_push_frame(
    seq: *mut EspSequence,
    timestamp: u64,
    points: *const f64,
    n_points: usize,
) -> EspStatus {
    guard(|| {
        let seq = seq.as_mut().ok_or_else(|| null("seq"))?;
        let raw: &[f64] = if n_points == 0 {
            &[]
        } else if points.is_null() {
            return Err(null("points"));
        } else {
            std::slice::from_raw_parts(points, n_points * POINT_FEATURES)
        };
        let pts = raw
            .chunks_exact(POINT_FEATURES)
            .map(|c| Point::new(c[0], c[1], c[2], c[3], c[4]))
            .collect();
        let mut next = seq.inner.clone();
        next.frames.push(Frame::new(timestamp, pts));
        next.validate()?;
        seq.inner = next;
        Ok(())
    })
}

/// # Safety
/// `seq` comes from this library; `out_count` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_frame_count(seq: *const EspSequence, out_count: *mut usize) -> EspStatus {
    guard(|| {
        let seq = obj(seq, "seq")?;
        *out(out_count, "out_count")? = seq.inner.frames.len();
        Ok(())
    })
}

/// # Safety
/// `seq` comes from this library; `out_count` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_point_count(
    seq: *const EspSequence,
    frame: usize,
    out_count: *mut usize,
) -> EspStatus {
    guard(|| {
        let seq = obj(seq, "seq")?;
        let o = out(out_count, "out_count")?;
        let f = seq.inner.frames.get(frame).ok_or_else(|| {
            Fail(
                EspStatus::InvalidConfig,
                format!("frame {frame} out of {}", seq.inner.frames.len()),
            )
        })?;
        *o = f.len();
        Ok(())
    })
}

/// # Safety
/// `seq` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esp_sequence_free(seq: *mut EspSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// Loads a checkpoint written by `espctl train`.
///
/// # Safety
/// `path` is a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_model_load(path: *const c_char, out_model: *mut *mut EspModel) -> EspStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let o = out(out_model, "out_model")?;
        let (inner, _) = EspPct::load(path)?;
        *o = Box::into_raw(Box::new(EspModel { inner }));
        Ok(())
    })
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` comes from this library; `out_count` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn esp_model_class_count(model: *const EspModel, out_count: *mut usize) -> EspStatus {
    guard(|| {
        let m = obj(model, "model")?;
        *out(out_count, "out_count")? = m.inner.config().head.classes();
        Ok(())
    })
}

/// Predicted class and its softmax probability. Either output may be null.
///
/// # Safety
/// `model` and `seq` come from this library; outputs are null or valid.
#[no_mangle]
pub unsafe extern "C" fn esp_model_classify(
    model: *const EspModel,
    seq: *const EspSequence,
    out_label: *mut u32,
    out_confidence: *mut f64,
) -> EspStatus {
    guard(|| {
        let m = obj(model, "model")?;
        let s = obj(seq, "seq")?;
        let p = m.inner.predict(&s.inner)?;
        if let Some(l) = out_label.as_mut() {
            *l = p.label as u32;
        }
        if let Some(c) = out_confidence.as_mut() {
            *c = p.confidence;
        }
        Ok(())
    })
}

/// # Safety
/// `model` is null or comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esp_model_free(model: *mut EspModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// FLOP and parameter counts as JSON for a config (JSON text, or null for
/// the defaults) on input of `frames` × `points`. Release the string with
/// [`esp_string_free`].
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out_json` is valid.
#[no_mangle]
pub unsafe extern "C" fn esp_cost_report_json(
    config_json: *const c_char,
    frames: u64,
    points: u64,
    out_json: *mut *mut c_char,
) -> EspStatus {
    guard(|| {
        let o = out(out_json, "out_json")?;
        let cfg = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let flops = count_flops(&cfg, InputShape::new(frames, points))?;
        let params = count_params(&cfg)?;
        let text = serde_json::json!({ "flops": flops, "params": params }).to_string();
        *o = CString::new(text).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn esp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
