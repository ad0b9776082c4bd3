//! C ABI over the haluprobe core.
//!
//! Every function returns an [`HpStatus`]; on failure the message is kept in
//! a thread-local buffer readable through [`hp_last_error_message`]. Handles
//! are opaque and must be released with their matching `*_free` function.
//! Panics never cross the boundary; they surface as `HP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use haluprobe::detect::{load_model, DetectorModel};
use haluprobe::features::{extract_feature_table, parse_feature_list, FeatureConfig, FeatureTable, HeadGranularity};
use haluprobe::selection::SelectionStrategy;
use haluprobe::trace::{load_trace_set, TraceSet};
use haluprobe::Error;

/// Result codes. Values past `HP_STATUS_INVALID_UTF8` mirror the core error classes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Format = 3,
    Validation = 4,
    UnsupportedVersion = 5,
    Bounds = 6,
    MissingSection = 7,
    Config = 8,
    Layout = 9,
    Training = 10,
    Divergence = 11,
    Model = 12,
    Undefined = 13,
    Io = 14,
    Json = 15,
    BufferTooSmall = 16,
    Panic = 17,
}

impl From<&Error> for HpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Format { .. } => HpStatus::Format,
            Error::Validation { .. } => HpStatus::Validation,
            Error::UnsupportedVersion { .. } => HpStatus::UnsupportedVersion,
            Error::Bounds(_) => HpStatus::Bounds,
            Error::MissingSection(_) => HpStatus::MissingSection,
            Error::Config(_) => HpStatus::Config,
            Error::Layout(_) => HpStatus::Layout,
            Error::Training(_) => HpStatus::Training,
            Error::Divergence { .. } => HpStatus::Divergence,
            Error::Model(_) => HpStatus::Model,
            Error::Undefined(_) => HpStatus::Undefined,
            Error::Io { .. } => HpStatus::Io,
            Error::Json { .. } => HpStatus::Json,
        }
    }
}

/// Loaded trace set.
pub struct HpTraceSet(TraceSet);
/// Extracted feature table.
pub struct HpFeatureTable(FeatureTable);
/// Trained detector.
pub struct HpModel(DetectorModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut s = msg.into();
    s.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Fail(HpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(HpStatus::from(&e), format!("{} error: {e}", e.class()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HpStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            HpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HpStatus::NullArgument, format!("{what} is null"))
}

/// Optional C string; null maps to `None`.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| Fail(HpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn req_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    opt_str(p, what)?.ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn hp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads and validates the trace set stored in directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_trace_set_load(dir: *const c_char, out: *mut *mut HpTraceSet) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let dir = PathBuf::from(req_str(dir, "dir")?);
        let set = load_trace_set(dir)?;
        *out = Box::into_raw(Box::new(HpTraceSet(set)));
        Ok(())
    })
}

/// Re-runs every structural check on a loaded set.
///
/// # Safety
/// `set` must come from [`hp_trace_set_load`] and not be freed.
#[no_mangle]
pub unsafe extern "C" fn hp_trace_set_validate(set: *const HpTraceSet) -> HpStatus {
    guard(|| Ok(handle(set, "set")?.0.validate()?))
}

/// Number of traces; 0 for a null handle.
///
/// # Safety
/// `set` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hp_trace_set_len(set: *const HpTraceSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `set` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hp_trace_set_free(set: *mut HpTraceSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Extracts a feature table. `strategy` is `all|per|first|last|win:W,S`;
/// `features` a comma list or `all` (null means all); `granularity`
/// `per_head|layer_mean` (null means layer_mean).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `set` must be live;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_extract(
    set: *const HpTraceSet,
    strategy: *const c_char,
    features: *const c_char,
    granularity: *const c_char,
    out: *mut *mut HpFeatureTable,
) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let set = &handle(set, "set")?.0;
        let strategy: SelectionStrategy = req_str(strategy, "strategy")?.parse()?;
        let mut config = match opt_str(features, "features")? {
            Some(list) => FeatureConfig::new(parse_feature_list(list)?),
            None => FeatureConfig::default(),
        };
        if let Some(g) = opt_str(granularity, "granularity")? {
            config = config.with_granularity(g.parse::<HeadGranularity>()?);
        }
        let table = extract_feature_table(set, &config, strategy)?;
        *out = Box::into_raw(Box::new(HpFeatureTable(table)));
        Ok(())
    })
}

/// Row count; 0 for a null handle.
///
/// # Safety
/// `table` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn hp_table_rows(table: *const HpFeatureTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.len())
}

/// Column count; 0 for a null handle.
///
/// # Safety
/// `table` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn hp_table_cols(table: *const HpFeatureTable) -> usize {
    table.as_ref().map_or(0, |t| t.0.n_features())
}

/// Copies the values row-major into `buf`, which must hold rows*cols doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_table_values(table: *const HpFeatureTable, buf: *mut f64, len: usize) -> HpStatus {
    guard(|| {
        let t = &handle(table, "table")?.0;
        let need = t.len() * t.n_features();
        if need == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < need {
            return Err(Fail(HpStatus::BufferTooSmall, format!("buffer holds {len} values, table has {need}")));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (chunk, row) in dst.chunks_mut(t.n_features()).zip(&t.rows) {
            chunk.copy_from_slice(&row.values);
        }
        Ok(())
    })
}

/// # Safety
/// `table` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hp_table_free(table: *mut HpFeatureTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Loads a model directory written by `haluprobe train`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hp_model_load(dir: *const c_char, out: *mut *mut HpModel) -> HpStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let model = load_model(PathBuf::from(req_str(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(HpModel(model)));
        Ok(())
    })
}

/// Input width the model expects; 0 for a null handle.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn hp_model_n_features(model: *const HpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_features())
}

/// Hallucination probability of one raw (unstandardized) feature vector.
///
/// # Safety
/// `x` must point to `n` doubles; `prob` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hp_model_predict(model: *const HpModel, x: *const f64, n: usize, prob: *mut f64) -> HpStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let prob = out_ptr(prob, "prob")?;
        if x.is_null() && n > 0 {
            return Err(null("x"));
        }
        let xs = if n == 0 { &[][..] } else { std::slice::from_raw_parts(x, n) };
        *prob = m.predict(xs)?;
        Ok(())
    })
}

/// Scores every row of `table`; the table layout must match the model's.
///
/// # Safety
/// `probs` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn hp_model_predict_table(
    model: *const HpModel,
    table: *const HpFeatureTable,
    probs: *mut f64,
    len: usize,
) -> HpStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let t = &handle(table, "table")?.0;
        if t.is_empty() {
            return Ok(());
        }
        if probs.is_null() {
            return Err(null("probs"));
        }
        if len < t.len() {
            return Err(Fail(HpStatus::BufferTooSmall, format!("buffer holds {len} values, table has {} rows", t.len())));
        }
        let p = m.predict_table(t)?;
        std::slice::from_raw_parts_mut(probs, p.len()).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hp_model_free(model: *mut HpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
