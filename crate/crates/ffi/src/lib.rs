//! C ABI over `ccr-core`.
//!
//! Every fallible function returns a [`CcrStatus`]; on failure the message is
//! available from [`ccr_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ccr_core::activations::read_activations;
use ccr_core::evaluation::kendall_tau;
use ccr_core::experiment::Method;
use ccr_core::probe::{coral_biases, Probe, ProbeDocument};
use ccr_core::task::{load_dataset, Dataset};
use ccr_core::trainer::{contrast_batch, normalize_task, single_batch, train_probe, TrainConfig};
use ccr_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Validation = 4,
    Dimension = 5,
    NonFinite = 6,
    Io = 7,
    MissingData = 8,
    Panic = 9,
}

/// A loaded task dataset.
pub struct CcrDataset {
    inner: Dataset,
}

/// A linear or CORAL probe.
pub struct CcrProbe {
    inner: Probe,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CcrStatus {
    match e {
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => CcrStatus::Parse,
        Error::Validation(_) => CcrStatus::Validation,
        Error::Dimension { .. } => CcrStatus::Dimension,
        Error::NonFinite(_) => CcrStatus::NonFinite,
        Error::InvalidArgument(_) => CcrStatus::InvalidArgument,
        Error::Io { .. } => CcrStatus::Io,
        Error::MissingGold(_) | Error::MissingCandidate { .. } | Error::MissingDump { .. } | Error::PendingListwise { .. } => {
            CcrStatus::MissingData
        }
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer passed as {what}"));
            CcrStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CcrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("{what} is not UTF-8")))?)
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ccr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Kendall's tau between two orderings of `n` items (item indices, best first).
///
/// # Safety
/// `pred` and `gold` must point to `n` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccr_kendall_tau(pred: *const usize, gold: *const usize, n: usize, out: *mut f64) -> CcrStatus {
    guard(|| {
        let pred = slice_arg(pred, n, "pred")?;
        let gold = slice_arg(gold, n, "gold")?;
        *out_arg(out, "out")? = kendall_tau(pred, gold)?;
        Ok(())
    })
}

/// Writes the `k` centered, decreasing CORAL thresholds for `(alpha, beta)`.
///
/// # Safety
/// `out` must have room for `k` values.
#[no_mangle]
pub unsafe extern "C" fn ccr_coral_biases(alpha: f64, beta: f64, k: usize, out: *mut f64) -> CcrStatus {
    guard(|| {
        let b = coral_biases(alpha, beta, k)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, k).copy_from_slice(b.as_slice());
        Ok(())
    })
}

/// Loads a task-list JSON document; filtered tasks are dropped.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccr_dataset_load(path: *const c_char, out: *mut *mut CcrDataset) -> CcrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let loaded = load_dataset(path)?;
        *out = Box::into_raw(Box::new(CcrDataset { inner: loaded.dataset }));
        Ok(())
    })
}

/// Number of tasks, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ccr_dataset_task_count(ds: *const CcrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.tasks.len())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccr_dataset_free(ds: *mut CcrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a probe JSON document.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ccr_probe_load(path: *const c_char, out: *mut *mut CcrProbe) -> CcrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let doc = ProbeDocument::from_json(&text)?;
        *out = Box::into_raw(Box::new(CcrProbe {
            inner: Probe::from_document(&doc)?,
        }));
        Ok(())
    })
}

/// Writes the probe as JSON.
///
/// # Safety
/// `probe` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ccr_probe_save(probe: *const CcrProbe, path: *const c_char) -> CcrStatus {
    guard(|| {
        let probe = probe.as_ref().ok_or(Fail::Null("probe"))?;
        let path = path_arg(path, "path")?;
        let text = probe.inner.to_document().to_json()?;
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        Ok(())
    })
}

/// Input dimension, or 0 for a null handle.
///
/// # Safety
/// `probe` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ccr_probe_dim(probe: *const CcrProbe) -> usize {
    probe.as_ref().map_or(0, |p| p.inner.shape().dim())
}

/// Scores the `n` items of one task given as a row-major `n × dim` matrix.
///
/// # Safety
/// `vectors` must hold `n * dim` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn ccr_probe_item_scores(
    probe: *const CcrProbe,
    vectors: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> CcrStatus {
    guard(|| {
        let probe = probe.as_ref().ok_or(Fail::Null("probe"))?;
        let len = n.checked_mul(dim).ok_or_else(|| Error::InvalidArgument("n * dim overflows".into()))?;
        let flat = slice_arg(vectors, len, "vectors")?;
        let rows: Vec<Vec<f64>> = flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        let scores = probe.inner.item_scores(&rows)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&scores);
        Ok(())
    })
}

/// # Safety
/// `probe` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ccr_probe_free(probe: *mut CcrProbe) {
    if !probe.is_null() {
        drop(Box::from_raw(probe));
    }
}

/// Trains a probe on one task of `ds` from an activation dump. `method` is a
/// method name such as `"TripletCCR-S"` or `"origCCS-P"`; `epochs` of 0
/// keeps the default.
///
/// # Safety
/// `ds` must be a live handle; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ccr_train_from_dump(
    ds: *const CcrDataset,
    task_index: usize,
    dump_path: *const c_char,
    method: *const c_char,
    epochs: usize,
    seed: u64,
    out: *mut *mut CcrProbe,
) -> CcrStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or(Fail::Null("ds"))?;
        let dump = path_arg(dump_path, "dump_path")?;
        let method = str_arg(method, "method")?;
        let out = out_arg(out, "out")?;
        let Method::Probe(kind) = method.parse::<Method>()? else {
            return Err(Error::InvalidArgument(format!("{method} is not a probe method")).into());
        };
        let task = ds.inner.tasks.get(task_index).ok_or_else(|| {
            Error::InvalidArgument(format!("task index {task_index} out of range ({} tasks)", ds.inner.tasks.len()))
        })?;
        let records = read_activations(&dump)?;
        let batch = if kind.uses_contrast_pairs() {
            contrast_batch(task, &records)?
        } else {
            single_batch(task, &records)?
        };
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if epochs > 0 {
            cfg.epochs = epochs;
        }
        let trained = train_probe(&[normalize_task(&batch)?], kind, &cfg)?;
        *out = Box::into_raw(Box::new(CcrProbe { inner: trained.probe }));
        Ok(())
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
