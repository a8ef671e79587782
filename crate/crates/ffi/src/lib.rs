//! C ABI for loading benchmarks, running fine-tuning and evaluating
//! checkpoints.
//!
//! Every fallible function returns a [`TgStatus`]. On failure a description
//! is kept per thread and can be read with [`tg_last_error_message`]. Handles
//! are opaque and must be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use toolgate::synth::{load_dataset, Benchmark};
use toolgate::train::{evaluate, pretrain, Checkpoint, Mode, TrainConfig, Trainer};
use toolgate::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Integrity = 5,
    Version = 6,
    Dataset = 7,
    Numeric = 8,
    Shape = 9,
    OutOfRange = 10,
    Panic = 11,
}

/// A loaded benchmark: source training split plus target test splits.
pub struct TgDataset {
    bench: Benchmark,
}

/// A fine-tuning run together with the data it trains on.
pub struct TgRun {
    trainer: Trainer,
    bench: Benchmark,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TgStatus {
    match err {
        Error::Config(_) | Error::UnknownModule(_) | Error::Parse { .. } => TgStatus::Config,
        Error::Io(_) => TgStatus::Io,
        Error::Integrity(_) => TgStatus::Integrity,
        Error::Version { .. } => TgStatus::Version,
        Error::Dataset(_) | Error::EmptySamples(_) => TgStatus::Dataset,
        Error::Numeric(_) => TgStatus::Numeric,
        Error::Dimension { .. } | Error::Shape(_) => TgStatus::Shape,
        Error::Index { .. } => TgStatus::OutOfRange,
    }
}

struct Fail(TgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            TgStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(TgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(TgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(TgStatus::NullArgument, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(TgStatus::NullArgument, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(TgStatus::NullArgument, format!("{what} is null")));
    }
    out.write(value);
    Ok(())
}

/// Message for the most recent failure on this thread, or null when the last
/// call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dumped dataset directory, or regenerates one from a manifest file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_load(path: *const c_char, out: *mut *mut TgDataset) -> TgStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let (_, bench) = load_dataset(&path)?;
        write_out(out, Box::into_raw(Box::new(TgDataset { bench })), "out")
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_train_count(ds: *const TgDataset, out: *mut usize) -> TgStatus {
    guard(|| write_out(out, handle(ds, "dataset")?.bench.train.len(), "out"))
}

/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_target_count(ds: *const TgDataset, out: *mut usize) -> TgStatus {
    guard(|| write_out(out, handle(ds, "dataset")?.bench.targets.len(), "out"))
}

/// # Safety
/// `ds` must be null or a handle from [`tg_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_dataset_free(ds: *mut TgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Reads a run config, pretrains the backbone and prepares a run. `mode`
/// may be null to keep the config's mode.
///
/// # Safety
/// `config_path` must be a NUL-terminated string, `mode` null or one, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_new(config_path: *const c_char, mode: *const c_char, seed: u64, out: *mut *mut TgRun) -> TgStatus {
    guard(|| {
        let mut cfg = TrainConfig::load(&path_arg(config_path, "config_path")?)?;
        if !mode.is_null() {
            cfg.mode = str_arg(mode, "mode")?.parse::<Mode>()?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        let (_, bench) = load_dataset(&cfg.dataset)?;
        let base = pretrain(&cfg, &bench)?;
        let trainer = Trainer::new(cfg, &base)?;
        write_out(out, Box::into_raw(Box::new(TgRun { trainer, bench })), "out")
    })
}

/// Restores a run from a checkpoint file, training on `dataset_path`.
///
/// # Safety
/// Both paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_load(checkpoint_path: *const c_char, dataset_path: *const c_char, out: *mut *mut TgRun) -> TgStatus {
    guard(|| {
        let ck = Checkpoint::load(&path_arg(checkpoint_path, "checkpoint_path")?)?;
        let trainer = Trainer::from_checkpoint(&ck)?;
        let (_, bench) = load_dataset(&path_arg(dataset_path, "dataset_path")?)?;
        toolgate::train::trainer::check_compatible(&trainer.config, &bench.config)?;
        write_out(out, Box::into_raw(Box::new(TgRun { trainer, bench })), "out")
    })
}

/// Trains up to iteration `until` (clamped to the configured total).
///
/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn tg_run_train_until(run: *mut TgRun, until: usize) -> TgStatus {
    guard(|| {
        let run = handle_mut(run, "run")?;
        run.trainer.run_until(&run.bench, until)?;
        Ok(())
    })
}

/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_iteration(run: *const TgRun, out: *mut usize) -> TgStatus {
    guard(|| write_out(out, handle(run, "run")?.trainer.iteration(), "out"))
}

/// Loss of the most recent update; fails before the first one.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_last_loss(run: *const TgRun, out: *mut f64) -> TgStatus {
    guard(|| {
        let loss = handle(run, "run")?
            .trainer
            .losses
            .last()
            .copied()
            .ok_or_else(|| Fail(TgStatus::OutOfRange, "no update has run yet".into()))?;
        write_out(out, loss, "out")
    })
}

/// Scalars currently receiving updates.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_trainable_params(run: *const TgRun, out: *mut usize) -> TgStatus {
    guard(|| write_out(out, handle(run, "run")?.trainer.trainable_now(), "out"))
}

/// Evaluates the current model on every target domain and writes the mean
/// mIoU.
///
/// # Safety
/// `run` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_run_target_miou(run: *const TgRun, out: *mut f64) -> TgStatus {
    guard(|| {
        let run = handle(run, "run")?;
        let recs = evaluate(&run.trainer.model, &run.bench, run.trainer.iteration())?;
        if recs.is_empty() {
            return Err(Fail(TgStatus::Dataset, "dataset has no target domains".into()));
        }
        write_out(out, recs.iter().map(|r| r.miou).sum::<f64>() / recs.len() as f64, "out")
    })
}

/// # Safety
/// `run` must be a live run handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tg_run_save(run: *const TgRun, path: *const c_char) -> TgStatus {
    guard(|| {
        let run = handle(run, "run")?;
        run.trainer.checkpoint().save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle from [`tg_run_new`]/[`tg_run_load`] not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_run_free(run: *mut TgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
