//! C ABI over `sag-core`: load datasets and checkpoints, run predictions,
//! compute flow-weighted release temperatures and run the gradient check.
//!
//! Every function returns a [`SagStatus`]; on failure the message is
//! available from [`sag_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sag_core::check::{run_gradcheck, EpisodeSize};
use sag_core::data::{load_dataset, BasinDataset, DataError, LoadOptions};
use sag_core::graph::NetworkTopology;
use sag_core::model::{flow_average_temperature, Checkpoint, ModelError};
use sag_core::pipeline::{predict_checkpoint, RunError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SagStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Numeric = 5,
    Model = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Loaded basin: topology plus dataset.
pub struct SagDataset {
    topology: NetworkTopology,
    data: BasinDataset,
}

/// Loaded checkpoint.
pub struct SagModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: SagStatus, message: impl Into<String>) -> SagStatus {
    set_error(message);
    status
}

fn data_status(e: &DataError) -> SagStatus {
    match e {
        DataError::Io { .. } => SagStatus::Io,
        DataError::ConfigInvalid(_) => SagStatus::InvalidArgument,
        _ => SagStatus::Data,
    }
}

fn run_status(e: &RunError) -> SagStatus {
    match e {
        RunError::Config(_) => SagStatus::InvalidArgument,
        RunError::Data(d) => data_status(d),
        RunError::Model(ModelError::Diff(_)) => SagStatus::Numeric,
        RunError::Train(_) | RunError::Model(_) => SagStatus::Model,
        RunError::MissingReleaseData(_) | RunError::Shape(_) => SagStatus::Data,
    }
}

/// Runs `f`, clearing the error slot first and turning panics into `Panic`.
fn guard(f: impl FnOnce() -> SagStatus) -> SagStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(SagStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, SagStatus> {
    if p.is_null() {
        return Err(fail(SagStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(SagStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sag_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sag_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the dataset directory `dir`. With `with_release` false the release
/// and profile tables are not read.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sag_dataset_load(dir: *const c_char, with_release: bool, out: *mut *mut SagDataset) -> SagStatus {
    guard(|| {
        if out.is_null() {
            return fail(SagStatus::NullPointer, "out is null");
        }
        let dir = match path_arg(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match load_dataset(&dir, LoadOptions { release: with_release }) {
            Ok((topology, data)) => {
                *out = Box::into_raw(Box::new(SagDataset { topology, data }));
                SagStatus::Ok
            }
            Err(e) => fail(data_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `dataset` must come from [`sag_dataset_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sag_dataset_free(dataset: *mut SagDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Writes the segment, reservoir and day counts.
///
/// # Safety
/// `dataset` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sag_dataset_shape(
    dataset: *const SagDataset,
    n_segments: *mut usize,
    n_reservoirs: *mut usize,
    n_days: *mut usize,
) -> SagStatus {
    guard(|| {
        let Some(ds) = dataset.as_ref() else {
            return fail(SagStatus::NullPointer, "dataset is null");
        };
        if n_segments.is_null() || n_reservoirs.is_null() || n_days.is_null() {
            return fail(SagStatus::NullPointer, "output is null");
        }
        *n_segments = ds.data.n_segments;
        *n_reservoirs = ds.data.n_reservoirs();
        *n_days = ds.data.n_days;
        SagStatus::Ok
    })
}

/// Loads a checkpoint file written by `sag train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sag_model_load(path: *const c_char, out: *mut *mut SagModel) -> SagStatus {
    guard(|| {
        if out.is_null() {
            return fail(SagStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) => return fail(SagStatus::Io, format!("{}: {e}", path.display())),
        };
        match Checkpoint::from_json(&text) {
            Ok(checkpoint) => {
                *out = Box::into_raw(Box::new(SagModel { checkpoint }));
                SagStatus::Ok
            }
            Err(e) => fail(SagStatus::Model, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from [`sag_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn sag_model_free(model: *mut SagModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts every segment and day of `dataset` into `out`, segment-major
/// (`out[i * n_days + t]`). `len` must be at least `n_segments * n_days`.
///
/// # Safety
/// Handles must be live; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sag_model_predict(model: *const SagModel, dataset: *const SagDataset, out: *mut f64, len: usize) -> SagStatus {
    guard(|| {
        let (Some(m), Some(ds)) = (model.as_ref(), dataset.as_ref()) else {
            return fail(SagStatus::NullPointer, "model or dataset is null");
        };
        if out.is_null() {
            return fail(SagStatus::NullPointer, "out is null");
        }
        let needed = ds.data.n_segments * ds.data.n_days;
        if len < needed {
            return fail(SagStatus::BufferTooSmall, format!("buffer holds {len} values, {needed} needed"));
        }
        match predict_checkpoint(&m.checkpoint, &ds.data, &ds.topology) {
            Ok(pred) => {
                let dst = std::slice::from_raw_parts_mut(out, needed);
                for (chunk, row) in dst.chunks_mut(ds.data.n_days).zip(&pred) {
                    chunk.copy_from_slice(row);
                }
                SagStatus::Ok
            }
            Err(e) => fail(run_status(&e), e.to_string()),
        }
    })
}

/// Flow-weighted release temperature over `len` outlet layers.
///
/// # Safety
/// `flows` and `temps` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sag_flow_average_temperature(flows: *const f64, temps: *const f64, len: usize, out: *mut f64) -> SagStatus {
    guard(|| {
        if flows.is_null() || temps.is_null() || out.is_null() {
            return fail(SagStatus::NullPointer, "argument is null");
        }
        let flows = std::slice::from_raw_parts(flows, len);
        let temps = std::slice::from_raw_parts(temps, len);
        match flow_average_temperature(flows, temps) {
            Ok(v) => {
                *out = v;
                SagStatus::Ok
            }
            Err(e) => fail(SagStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Runs the canonical gradient check (`size` 0 = tiny, 1 = small) and
/// writes the maximum relative error.
///
/// # Safety
/// `max_relative_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sag_gradcheck(size: u32, max_relative_error: *mut f64) -> SagStatus {
    guard(|| {
        if max_relative_error.is_null() {
            return fail(SagStatus::NullPointer, "output is null");
        }
        let size = match size {
            0 => EpisodeSize::Tiny,
            1 => EpisodeSize::Small,
            other => return fail(SagStatus::InvalidArgument, format!("unknown size {other}")),
        };
        match run_gradcheck(size) {
            Ok(r) => {
                *max_relative_error = r.max_relative_error;
                SagStatus::Ok
            }
            Err(e) => fail(SagStatus::Numeric, e.to_string()),
        }
    })
}
