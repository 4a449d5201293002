//! C ABI over `dada-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free`. Every fallible call returns a `DadaStatus`; on
//! failure `dada_last_error` describes the most recent error on the calling
//! thread. Panics are caught and reported as `DADA_STATUS_PANIC`.
//!
//! Strings handed out through caller buffers follow one rule: the call
//! stores the full length (without the terminating NUL) in `*needed` and
//! copies as much as fits, always NUL-terminating when `cap > 0`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dada_core::datagen::{load_csv, DataSpec, DatasetPair};
use dada_core::error::DadaError;
use dada_core::eval::{EvalReport, TargetMonitor};
use dada_core::model::{predict_category, DadaNetwork};
use dada_core::trainer::{lambda_schedule, lr_schedule, train, TrainConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DadaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Arguments, data or a training config were rejected.
    Invalid = 3,
    /// A file could not be read or written.
    Io = 4,
    /// Parse error in CSV, JSON or a checkpoint.
    Parse = 5,
    /// A failure inside the library that is not the caller's fault.
    Internal = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

pub struct DadaDataset(DatasetPair);
pub struct DadaConfig(TrainConfig);
pub struct DadaModel(DadaNetwork);
pub struct DadaReport(EvalReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(DadaStatus, String);

impl From<DadaError> for Fail {
    fn from(e: DadaError) -> Self {
        let status = match &e {
            DadaError::Io { .. } => DadaStatus::Io,
            DadaError::Parse { .. } | DadaError::Json(_) => DadaStatus::Parse,
            DadaError::Backward(_) => DadaStatus::Internal,
            _ => DadaStatus::Invalid,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DadaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DadaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            DadaStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DadaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Fail(DadaStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn give<T>(slot: *mut *mut T, value: T) -> Result<(), Fail> {
    *out(slot, "out")? = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    *out(needed, "needed")? = s.len();
    if cap > 0 {
        if buf.is_null() {
            return Err(null("buf"));
        }
        let n = s.len().min(cap - 1);
        ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
    }
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dada_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dada_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Learning rate at progress `p` in [0, 1].
#[no_mangle]
pub extern "C" fn dada_lr_schedule(p: f64, eta0: f64, alpha: f64, beta: f64) -> f64 {
    lr_schedule(p, eta0, alpha, beta)
}

/// Adversarial weight at progress `p` in [0, 1].
#[no_mangle]
pub extern "C" fn dada_lambda_schedule(p: f64, gamma: f64) -> f64 {
    lambda_schedule(p, gamma)
}

/// Generates a dataset from a JSON data spec such as
/// `{"kind":"two_moons","n_per_domain":200,"rotation_deg":30,"noise_sd":0.1}`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dada_dataset_generate(spec_json: *const c_char, seed: u64, out: *mut *mut DadaDataset) -> DadaStatus {
    guard(|| {
        let spec: DataSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(DadaError::from)?;
        give(out, DadaDataset(spec.generate(seed)?))
    })
}

/// Loads a dataset directory (`source.csv` and `target.csv`) or a combined CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dada_dataset_load(path: *const c_char, out: *mut *mut DadaDataset) -> DadaStatus {
    guard(|| give(out, DadaDataset(load_csv(str_arg(path, "path")?)?)))
}

/// Source and target instance counts.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dada_dataset_sizes(ds: *const DadaDataset, n_source: *mut usize, n_target: *mut usize) -> DadaStatus {
    guard(|| {
        let ds = obj(ds, "dataset")?;
        *out(n_source, "n_source")? = ds.0.source.len();
        *out(n_target, "n_target")? = ds.0.target.len();
        Ok(())
    })
}

/// SHA-256 hex fingerprint of the dataset.
///
/// # Safety
/// `ds` and `needed` must be valid; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dada_dataset_fingerprint(ds: *const DadaDataset, buf: *mut c_char, cap: usize, needed: *mut usize) -> DadaStatus {
    guard(|| copy_out(&obj(ds, "dataset")?.0.fingerprint(), buf, cap, needed))
}

/// # Safety
/// `ds` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dada_dataset_free(ds: *mut DadaDataset) {
    free(ds)
}

/// Parses a TOML training config; absent keys take their defaults.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dada_config_from_toml(toml: *const c_char, out: *mut *mut DadaConfig) -> DadaStatus {
    guard(|| give(out, DadaConfig(TrainConfig::from_toml(str_arg(toml, "toml")?)?)))
}

/// Renders a config back to TOML.
///
/// # Safety
/// `cfg` and `needed` must be valid; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dada_config_to_toml(cfg: *const DadaConfig, buf: *mut c_char, cap: usize, needed: *mut usize) -> DadaStatus {
    guard(|| copy_out(&obj(cfg, "config")?.0.to_toml()?, buf, cap, needed))
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dada_config_free(cfg: *mut DadaConfig) {
    free(cfg)
}

/// Trains a network on the labelled source and unlabelled target of `ds`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dada_train(cfg: *const DadaConfig, ds: *const DadaDataset, out: *mut *mut DadaModel) -> DadaStatus {
    guard(|| {
        let cfg = &obj(cfg, "config")?.0;
        let pair = &obj(ds, "dataset")?.0;
        cfg.check_scenario(pair.scenario)?;
        let (data, _) = pair.split();
        give(out, DadaModel(train(cfg, &data, None)?.state.net))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dada_model_load(path: *const c_char, out: *mut *mut DadaModel) -> DadaStatus {
    guard(|| give(out, DadaModel(DadaNetwork::load(str_arg(path, "path")?)?)))
}

/// # Safety
/// `model` must be valid and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dada_model_save(model: *const DadaModel, path: *const c_char) -> DadaStatus {
    guard(|| Ok(obj(model, "model")?.0.save(str_arg(path, "path")?)?))
}

/// Input width and number of category outputs.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dada_model_dims(model: *const DadaModel, input_dim: *mut usize, num_classes: *mut usize) -> DadaStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        *out(input_dim, "input_dim")? = m.input_dim();
        *out(num_classes, "num_classes")? = m.num_classes();
        Ok(())
    })
}

/// Predicts `n` row-major instances of width `dim`. Writes the argmax
/// category into `labels[i]` and, when `domain_prob` is not null, the
/// domain-neuron probability into `domain_prob[i]`.
///
/// # Safety
/// `x` must hold `n * dim` values, `labels` (and `domain_prob` if given) `n`.
#[no_mangle]
pub unsafe extern "C" fn dada_model_predict(
    model: *const DadaModel,
    x: *const f64,
    n: usize,
    dim: usize,
    labels: *mut usize,
    domain_prob: *mut f64,
) -> DadaStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        if n == 0 {
            return Ok(());
        }
        if x.is_null() {
            return Err(null("x"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if dim != m.input_dim() {
            return Err(Fail(DadaStatus::Invalid, format!("model expects {} features, got {dim}", m.input_dim())));
        }
        let flat = std::slice::from_raw_parts(x, n * dim);
        let rows: Vec<Vec<f64>> = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        let outs = m.forward(&rows)?;
        let labels = std::slice::from_raw_parts_mut(labels, n);
        for (slot, o) in labels.iter_mut().zip(&outs) {
            *slot = predict_category(o);
        }
        if !domain_prob.is_null() {
            let d = std::slice::from_raw_parts_mut(domain_prob, n);
            for (slot, o) in d.iter_mut().zip(&outs) {
                *slot = o.domain_prob();
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dada_model_free(model: *mut DadaModel) {
    free(model)
}

/// Scores `model` on the labelled target of `ds`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dada_evaluate(model: *const DadaModel, ds: *const DadaDataset, out: *mut *mut DadaReport) -> DadaStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        let pair = &obj(ds, "dataset")?.0;
        give(out, DadaReport(TargetMonitor::new(pair).report(m)?))
    })
}

/// Looks up a scalar metric such as `acc_target`, `os_star` or `unk_recall`.
/// Returns `DADA_STATUS_INVALID` if the report has no such metric.
///
/// # Safety
/// All pointers must be valid; `name` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dada_report_metric(report: *const DadaReport, name: *const c_char, value: *mut f64) -> DadaStatus {
    guard(|| {
        let r = &obj(report, "report")?.0;
        let name = str_arg(name, "name")?;
        let v = r
            .metrics()
            .into_iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Fail(DadaStatus::Invalid, format!("no metric {name:?}")))?;
        *out(value, "value")? = v;
        Ok(())
    })
}

/// The report as JSON lines.
///
/// # Safety
/// `report` and `needed` must be valid; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dada_report_jsonl(report: *const DadaReport, buf: *mut c_char, cap: usize, needed: *mut usize) -> DadaStatus {
    guard(|| copy_out(&obj(report, "report")?.0.to_jsonl()?, buf, cap, needed))
}

/// # Safety
/// `report` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dada_report_free(report: *mut DadaReport) {
    free(report)
}
