//! C ABI over the core library: opaque handles, integer status codes, and a
//! thread-local last-error message. The header `include/nedvae.h` is
//! regenerated by the build script.
//!
//! Ownership rules: every `*_out` handle returned with [`NedStatus::Ok`]
//! must be released with the matching `*_free` function. Strings returned
//! by [`ned_last_error`] stay owned by the library and are valid until the
//! next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;

use nedvae::graphdata::{self, Dataset, GenConfig};
use nedvae::metrics::{self, MetricParams};
use nedvae::objective::{ObjectiveSpec, Variant};
use nedvae::trainer::{self, Checkpoint, TrainConfig, TrainError};
use nedvae::traversal::{self, BaseCode};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NedStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    DataError = 3,
    NumericError = 4,
    IoError = 5,
}

/// Opaque dataset handle.
pub struct NedDataset {
    inner: Dataset,
}

/// Opaque trained-model handle (a full checkpoint).
pub struct NedModel {
    inner: Checkpoint,
}

/// Metric scores produced by `ned_eval_metrics`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct NedMetricReport {
    pub beta_m: f64,
    pub factor_m: f64,
    pub dci: f64,
    pub modularity: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(message.replace('\0', " "))
            .unwrap_or_else(|_| CString::new("error message unavailable").unwrap());
    });
}

/// Message describing the most recent failure on this thread. Never null;
/// empty before any failure. The pointer is invalidated by the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn ned_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// # Safety
/// `s` must be null or a valid NUL-terminated C string.
unsafe fn utf8_arg<'a>(s: *const c_char) -> Result<&'a str, NedStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(NedStatus::NullArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        NedStatus::InvalidUtf8
    })
}

fn train_error_status(e: &TrainError) -> NedStatus {
    match e {
        TrainError::Numeric { .. } | TrainError::Adam(_) => NedStatus::NumericError,
        TrainError::Io(_) => NedStatus::IoError,
        _ => NedStatus::DataError,
    }
}

/// Generate a synthetic dataset with default factor grids.
/// `family` is "er" or "ws".
///
/// # Safety
/// `family` must be a valid C string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ned_dataset_generate(
    family: *const c_char,
    n: u32,
    samples: u32,
    seed: u64,
    out: *mut *mut NedDataset,
) -> NedStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NedStatus::NullArgument;
    }
    let family = match utf8_arg(family) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let config = match family.to_ascii_lowercase().as_str() {
        "er" => GenConfig::er_default(n as usize, samples as usize),
        "ws" => GenConfig::ws_default(n as usize, samples as usize),
        other => {
            set_error(format!("unknown family {other:?}; expected er or ws"));
            return NedStatus::DataError;
        }
    };
    match graphdata::generate(&config, seed) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(NedDataset { inner: ds }));
            NedStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            NedStatus::DataError
        }
    }
}

/// Read a JSON-Lines dataset file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ned_dataset_read(
    path: *const c_char,
    out: *mut *mut NedDataset,
) -> NedStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NedStatus::NullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match graphdata::read_dataset(path) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(NedDataset { inner: ds }));
            NedStatus::Ok
        }
        Err(graphdata::DataError::Io(e)) => {
            set_error(e.to_string());
            NedStatus::IoError
        }
        Err(e) => {
            set_error(e.to_string());
            NedStatus::DataError
        }
    }
}

/// Write a dataset as JSON-Lines.
///
/// # Safety
/// `ds` must be a live dataset handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ned_dataset_write(ds: *const NedDataset, path: *const c_char) -> NedStatus {
    let Some(ds) = ds.as_ref() else {
        set_error("null dataset handle");
        return NedStatus::NullArgument;
    };
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match graphdata::write_dataset(&ds.inner, path) {
        Ok(()) => NedStatus::Ok,
        Err(graphdata::DataError::Io(e)) => {
            set_error(e.to_string());
            NedStatus::IoError
        }
        Err(e) => {
            set_error(e.to_string());
            NedStatus::DataError
        }
    }
}

/// Number of records in a dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ned_dataset_len(ds: *const NedDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `ds` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ned_dataset_free(ds: *mut NedDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Train a model on the dataset. `variant` is one of the objective names
/// (for example "NED-VAE" or "GDVAE-baseline"); weights stay at their
/// defaults.
///
/// # Safety
/// `ds` must be a live dataset handle; `variant` a valid C string; `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ned_train(
    ds: *const NedDataset,
    variant: *const c_char,
    iterations: u32,
    batch_size: u32,
    seed: u64,
    out: *mut *mut NedModel,
) -> NedStatus {
    let Some(ds) = ds.as_ref() else {
        set_error("null dataset handle");
        return NedStatus::NullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return NedStatus::NullArgument;
    }
    let variant = match utf8_arg(variant) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let variant = match Variant::parse(variant) {
        Ok(v) => v,
        Err(e) => {
            set_error(e.to_string());
            return NedStatus::DataError;
        }
    };
    if ds.inner.is_empty() {
        set_error("dataset is empty");
        return NedStatus::DataError;
    }
    let sample = &ds.inner.records[0].0;
    let model_config =
        nedvae::model::ModelConfig::new(sample.n, sample.k, sample.d, variant.model_kind());
    let spec = ObjectiveSpec::new(variant);
    let config = TrainConfig {
        iterations: iterations as usize,
        batch_size: batch_size as usize,
        seed,
        ..TrainConfig::default()
    };
    match trainer::train(&ds.inner, model_config, spec, &config, None) {
        Ok((checkpoint, _log)) => {
            *out = Box::into_raw(Box::new(NedModel { inner: checkpoint }));
            NedStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            train_error_status(&e)
        }
    }
}

/// Load a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ned_checkpoint_load(
    path: *const c_char,
    out: *mut *mut NedModel,
) -> NedStatus {
    if out.is_null() {
        set_error("null output pointer");
        return NedStatus::NullArgument;
    }
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match trainer::load_checkpoint(path) {
        Ok(cp) => {
            *out = Box::into_raw(Box::new(NedModel { inner: cp }));
            NedStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            train_error_status(&e)
        }
    }
}

/// Save a checkpoint file.
///
/// # Safety
/// `model` must be a live model handle; `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ned_checkpoint_save(
    model: *const NedModel,
    path: *const c_char,
) -> NedStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return NedStatus::NullArgument;
    };
    let path = match utf8_arg(path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match trainer::save_checkpoint(&model.inner, path) {
        Ok(()) => NedStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            train_error_status(&e)
        }
    }
}

/// # Safety
/// `model` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ned_model_free(model: *mut NedModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Score a trained model on a dataset with default metric parameters.
///
/// # Safety
/// `model` and `ds` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ned_eval_metrics(
    model: *const NedModel,
    ds: *const NedDataset,
    seed: u64,
    out: *mut NedMetricReport,
) -> NedStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return NedStatus::NullArgument;
    };
    let Some(ds) = ds.as_ref() else {
        set_error("null dataset handle");
        return NedStatus::NullArgument;
    };
    if out.is_null() {
        set_error("null output pointer");
        return NedStatus::NullArgument;
    }
    let trained = model.inner.model();
    let rep = match metrics::represent(&ds.inner, &trained) {
        Ok(rep) => rep,
        Err(e) => {
            set_error(e.to_string());
            return NedStatus::NumericError;
        }
    };
    match metrics::evaluate_metrics(&rep, &MetricParams::default(), seed) {
        Ok(report) => {
            *out = NedMetricReport {
                beta_m: report.beta_m,
                factor_m: report.factor_m,
                dci: report.dci,
                modularity: report.modularity,
            };
            NedStatus::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            NedStatus::DataError
        }
    }
}

/// Write the full latent-traversal effect profile (all groups, all
/// dimensions, default grid) as CSV.
///
/// # Safety
/// `model` must be a live model handle; `out_path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ned_effect_profile_csv(
    model: *const NedModel,
    out_path: *const c_char,
    s_seed: u64,
) -> NedStatus {
    let Some(model) = model.as_ref() else {
        set_error("null model handle");
        return NedStatus::NullArgument;
    };
    let path = match utf8_arg(out_path) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let trained = model.inner.model();
    let grid = nedvae::traversal::TraversalSpec::default_grid();
    let profile = match traversal::effect_profile(&trained, None, BaseCode::Zeros, &grid, s_seed) {
        Ok(p) => p,
        Err(e) => {
            set_error(e.to_string());
            return NedStatus::NumericError;
        }
    };
    let path = PathBuf::from(path);
    let mut file = match std::fs::File::create(&path) {
        Ok(f) => f,
        Err(e) => {
            set_error(e.to_string());
            return NedStatus::IoError;
        }
    };
    match profile.write_csv(&mut file) {
        Ok(()) => NedStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            NedStatus::IoError
        }
    }
}
