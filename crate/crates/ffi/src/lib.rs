//! C ABI over the `gladcf` detector.
//!
//! Every fallible function returns a [`GladcfStatus`]. On failure the
//! message is kept in thread-local storage and can be read with
//! [`gladcf_last_error`]. Objects cross the boundary as opaque handles that
//! must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gladcf::config::ExperimentConfig;
use gladcf::detector::{self, DetectorParams};
use gladcf::experiment::{self, EvalReport};
use gladcf::tu::{self, FeatureConfig, LoadOptions};
use gladcf::{metrics, Error, FeatureMode, GraphDataset, Label};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GladcfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad argument value: invalid UTF-8, unknown option, out-of-range index.
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DatasetNotFound = 5,
    Shape = 6,
    UndefinedMetric = 7,
    NonFinite = 8,
    /// Rust panic caught at the boundary.
    Internal = 9,
}

/// Loaded graph dataset.
pub struct GladcfDataset {
    inner: GraphDataset,
}

/// Experiment configuration, seeded with per-dataset defaults.
pub struct GladcfConfig {
    inner: ExperimentConfig,
}

/// Trained detector parameters.
pub struct GladcfModel {
    inner: DetectorParams,
}

/// Cross-validation report.
pub struct GladcfReport {
    inner: EvalReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> GladcfStatus {
    match err {
        Error::Io { .. } => GladcfStatus::Io,
        Error::Format { .. } | Error::Serde(_) => GladcfStatus::Format,
        Error::DatasetNotFound(_) => GladcfStatus::DatasetNotFound,
        Error::Size(_) | Error::Shape(_) => GladcfStatus::Shape,
        Error::Config(_) => GladcfStatus::InvalidArgument,
        Error::UndefinedMetric(_) => GladcfStatus::UndefinedMetric,
        Error::NonFinite(_) => GladcfStatus::NonFinite,
        Error::Fold { source, .. } => status_of(source),
    }
}

struct Failure(GladcfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GladcfStatus::InvalidArgument, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(GladcfStatus::NullArgument, format!("{name} is null"))
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GladcfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            GladcfStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal error: {msg}"));
            GladcfStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, want: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    if len < want {
        return Err(invalid(format!("{name} holds {len} elements, {want} required")));
    }
    Ok(std::slice::from_raw_parts_mut(p, want))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Last error message on this thread, or null if the last call succeeded.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn gladcf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gladcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a TU-format dataset directory.
///
/// `feature_mode` is one of `identity`, `db`, `ldp`; null means `identity`.
/// Graphs whose TU label equals `anomaly_label` are treated as anomalous.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_dataset_load(
    dir: *const c_char,
    feature_mode: *const c_char,
    anomaly_label: i64,
    out: *mut *mut GladcfDataset,
) -> GladcfStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let mode = if feature_mode.is_null() {
            FeatureMode::Identity
        } else {
            let s = str_arg(feature_mode, "feature_mode")?;
            FeatureMode::parse(s).ok_or_else(|| invalid(format!("unknown feature mode {s:?}")))?
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let options = LoadOptions {
            anomaly_label,
            ..LoadOptions::default()
        };
        let inner = tu::load_dataset(Path::new(dir), options, FeatureConfig::new(mode))?;
        write_out(out, Box::into_raw(Box::new(GladcfDataset { inner })), "out")
    })
}

/// # Safety
/// `ds` must come from [`gladcf_dataset_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_dataset_free(ds: *mut GladcfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of graphs, 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_dataset_len(ds: *const GladcfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Node feature width, 0 for a null handle.
///
/// # Safety
/// `ds` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_dataset_feature_dim(ds: *const GladcfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.feature_dim())
}

/// Copy binary labels (0 normal, 1 anomalous) into `out`.
///
/// # Safety
/// `out` must hold at least `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn gladcf_dataset_labels(ds: *const GladcfDataset, out: *mut u8, len: usize) -> GladcfStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let dst = out_slice(out, len, ds.inner.len(), "out")?;
        for (d, g) in dst.iter_mut().zip(&ds.inner.graphs) {
            *d = g.label.as_u8();
        }
        Ok(())
    })
}

/// New configuration with the defaults for `dataset`.
///
/// # Safety
/// `dataset` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_config_new(dataset: *const c_char, out: *mut *mut GladcfConfig) -> GladcfStatus {
    guard(|| {
        let name = str_arg(dataset, "dataset")?;
        let inner = ExperimentConfig::for_dataset(name);
        write_out(out, Box::into_raw(Box::new(GladcfConfig { inner })), "out")
    })
}

/// Set one option using the same keys as the CLI config file
/// (`seed`, `folds`, `epochs`, `beta`, `variant`, ...).
///
/// # Safety
/// `cfg` must be live; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gladcf_config_set(
    cfg: *mut GladcfConfig,
    key: *const c_char,
    value: *const c_char,
) -> GladcfStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let key = str_arg(key, "key")?;
        let value = str_arg(value, "value")?;
        cfg.inner.set(key, value)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from [`gladcf_config_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_config_free(cfg: *mut GladcfConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run stratified cross-validation on an already loaded dataset.
/// Feature settings in `cfg` are ignored; the dataset's own features are used.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_run_cv(
    ds: *const GladcfDataset,
    cfg: *const GladcfConfig,
    out: *mut *mut GladcfReport,
) -> GladcfStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        let cfg = handle(cfg, "cfg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        cfg.inner.validate()?;
        let (inner, _) = experiment::run_cv_on(&ds.inner, &cfg.inner, 1)?;
        write_out(out, Box::into_raw(Box::new(GladcfReport { inner })), "out")
    })
}

/// # Safety
/// `report` must come from [`gladcf_run_cv`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_free(report: *mut GladcfReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Mean fold AUC, NaN for a null handle.
///
/// # Safety
/// `report` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_mean_auc(report: *const GladcfReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.inner.mean_auc)
}

/// Population standard deviation of fold AUCs, NaN for a null handle.
///
/// # Safety
/// `report` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_std_auc(report: *const GladcfReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.inner.std_auc)
}

/// # Safety
/// `report` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_num_folds(report: *const GladcfReport) -> usize {
    report.as_ref().map_or(0, |r| r.inner.fold_aucs.len())
}

/// # Safety
/// `report` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_fold_auc(report: *const GladcfReport, fold: usize, out: *mut f64) -> GladcfStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let auc = *r
            .inner
            .fold_aucs
            .get(fold)
            .ok_or_else(|| invalid(format!("fold {fold} out of range")))?;
        write_out(out, auc, "out")
    })
}

/// Write the report as JSON.
///
/// # Safety
/// `report` must be live; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gladcf_report_write_json(report: *const GladcfReport, path: *const c_char) -> GladcfStatus {
    guard(|| {
        let r = handle(report, "report")?;
        let path = str_arg(path, "path")?;
        r.inner.write_json(path)?;
        Ok(())
    })
}

/// Load a fold checkpoint (`model.json`).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_model_load(path: *const c_char, out: *mut *mut GladcfModel) -> GladcfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (inner, _) = DetectorParams::load(path)?;
        write_out(out, Box::into_raw(Box::new(GladcfModel { inner })), "out")
    })
}

/// # Safety
/// `model` must come from [`gladcf_model_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn gladcf_model_free(model: *mut GladcfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Anomaly scores in (0, 1) for every graph of `ds`.
///
/// # Safety
/// Handles must be live; `out` must hold at least `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn gladcf_model_score(
    model: *const GladcfModel,
    ds: *const GladcfDataset,
    out: *mut f64,
    len: usize,
) -> GladcfStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let ds = handle(ds, "ds")?;
        let dst = out_slice(out, len, ds.inner.len(), "out")?;
        let scores = detector::score_graphs(&model.inner, &ds.inner.graphs)?;
        dst.copy_from_slice(&scores);
        Ok(())
    })
}

/// ROC-AUC of `scores` against binary `labels` (1 = anomalous).
///
/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gladcf_compute_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> GladcfStatus {
    guard(|| {
        if scores.is_null() {
            return Err(null("scores"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        let scores = std::slice::from_raw_parts(scores, n);
        let labels = std::slice::from_raw_parts(labels, n)
            .iter()
            .map(|&l| Label::from_u8(l).ok_or_else(|| invalid(format!("label {l} is not 0 or 1"))))
            .collect::<Result<Vec<_>, _>>()?;
        let auc = metrics::compute_auc(scores, &labels)?;
        write_out(out, auc, "out")
    })
}
