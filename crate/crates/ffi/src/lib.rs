//! C ABI over `gendilate`.
//!
//! Objects cross the boundary as opaque handles (`GdTensor`, `GdMask`,
//! `GdReport`) created by `gd_*_new`/constructor calls and released with
//! the matching `*_free`. Every fallible call returns a `GdStatus`; on
//! failure `gd_last_error()` describes the problem for the calling thread.
//! Strings handed out by the library are released with `gd_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gendilate::constraint::{barrier, check_alpha};
use gendilate::conv::{conv_direct, ConvSpec, Padding};
use gendilate::dilation::MaskParams;
use gendilate::experiment::{self, ExperimentConfig, Outcome};
use gendilate::gradcheck::{run_suite, standard_cases, Scope, SEEDS};
use gendilate::synth::mask_recovery_score;
use gendilate::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Parse = 5,
    Config = 6,
    Diverged = 7,
    Io = 8,
    Panic = 9,
}

/// Dense row-major `f64` tensor.
pub struct GdTensor(Tensor);

/// Dilation mask parameters (separable or general).
pub struct GdMask(MaskParams);

/// Result of a training run.
pub struct GdReport(Outcome);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GdStatus {
    match e {
        Error::ShapeMismatch { .. } => GdStatus::ShapeMismatch,
        Error::InvalidArgument(_) => GdStatus::InvalidArgument,
        Error::NonFinite { .. } => GdStatus::NonFinite,
        Error::Parse(_) | Error::Json(_) => GdStatus::Parse,
        Error::Config { .. } => GdStatus::Config,
        Error::Diverged { .. } => GdStatus::Diverged,
        Error::Io(_) => GdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GdStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            GdStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            GdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message for the last failed call on this thread; empty after success.
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn gd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a tensor by copying `len` values laid out row-major in `shape`.
///
/// # Safety
/// `shape` must point to `ndim` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_new(
    shape: *const usize,
    ndim: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut GdTensor,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = slice(shape, ndim, "shape")?.to_vec();
        let data = slice(data, len, "data")?.to_vec();
        *out = boxed(GdTensor(Tensor::new(shape, data)?));
        Ok(())
    })
}

/// # Safety
/// `t` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_free(t: *mut GdTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Number of dimensions, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_ndim(t: *const GdTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.ndim())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_len(t: *const GdTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the shape into `out`, which holds `cap` entries.
///
/// # Safety
/// `t` must be a live handle and `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_shape(
    t: *const GdTensor,
    out: *mut usize,
    cap: usize,
) -> GdStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let shape = t.0.shape();
        if cap < shape.len() {
            return Err(Error::InvalidArgument(format!(
                "shape needs {} entries, got {cap}",
                shape.len()
            ))
            .into());
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        ptr::copy_nonoverlapping(shape.as_ptr(), out, shape.len());
        Ok(())
    })
}

/// Borrowed pointer to the row-major values; valid while `t` lives.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gd_tensor_data(t: *const GdTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Single-channel 1-D or 2-D dilated convolution with stride 1.
/// `same_padding` selects zero padding that keeps the input extent;
/// `correlation` false flips the kernel.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_conv_direct(
    input: *const GdTensor,
    kernel: *const GdTensor,
    dilation: usize,
    same_padding: bool,
    correlation: bool,
    out: *mut *mut GdTensor,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = ConvSpec {
            dilation,
            padding: if same_padding {
                Padding::Same
            } else {
                Padding::Valid
            },
            correlation,
        };
        let y = conv_direct(
            &deref(input, "input")?.0,
            &deref(kernel, "kernel")?.0,
            &spec,
        )?;
        *out = boxed(GdTensor(y));
        Ok(())
    })
}

/// Barrier value `exp(10(x − 0.5)) + αx`; α must lie in [−0.1, 0.1].
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_barrier(x: f64, alpha: f64, out: *mut f64) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        check_alpha(alpha)?;
        *out = barrier(x, alpha);
        Ok(())
    })
}

/// Separable mask from row and column logit vectors with a per-axis
/// budget.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_mask_separable(
    rows: *const GdTensor,
    cols: *const GdTensor,
    budget_rows: usize,
    budget_cols: usize,
    out: *mut *mut GdMask,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let rows = deref(rows, "rows")?.0.clone();
        let cols = deref(cols, "cols")?.0.clone();
        let field = [rows.len(), cols.len()];
        let m = MaskParams::separable(field, [budget_rows, budget_cols], rows, cols)?;
        *out = boxed(GdMask(m));
        Ok(())
    })
}

/// General mask from a logit matrix; the active-cell budget is
/// `budget_rows * budget_cols`.
///
/// # Safety
/// `logits` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_mask_general(
    logits: *const GdTensor,
    budget_rows: usize,
    budget_cols: usize,
    out: *mut *mut GdMask,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let logits = deref(logits, "logits")?.0.clone();
        *out = boxed(GdMask(MaskParams::general(
            [budget_rows, budget_cols],
            logits,
        )?));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gd_mask_free(m: *mut GdMask) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Soft mask `σ(·)` as a new tensor.
///
/// # Safety
/// `m` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_mask_soft(m: *const GdMask, out: *mut *mut GdTensor) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(GdTensor(deref(m, "mask")?.0.soft()));
        Ok(())
    })
}

/// Binary mask under `threshold`, capped at the budget. `feasible` is set
/// to false when entries had to be dropped to meet the budget.
///
/// # Safety
/// `m` must be live; `out` and `feasible` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_mask_binarize(
    m: *const GdMask,
    threshold: f64,
    out: *mut *mut GdTensor,
    feasible: *mut bool,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let feasible = out_ptr(feasible, "feasible")?;
        let b = deref(m, "mask")?.0.binarize(threshold)?;
        *feasible = b.feasible;
        *out = boxed(GdTensor(b.pattern));
        Ok(())
    })
}

/// Precision and recall of a learned binary mask against a reference.
///
/// # Safety
/// Handles must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_recovery_score(
    learned: *const GdTensor,
    truth: *const GdTensor,
    precision: *mut f64,
    recall: *mut f64,
) -> GdStatus {
    guard(|| {
        let precision = out_ptr(precision, "precision")?;
        let recall = out_ptr(recall, "recall")?;
        let (p, r) = mask_recovery_score(&deref(learned, "learned")?.0, &deref(truth, "truth")?.0)?;
        *precision = p;
        *recall = r;
        Ok(())
    })
}

/// Trains a model described by an experiment config in JSON. Nothing is
/// written to disk.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_experiment_run(
    config_json: *const c_char,
    out: *mut *mut GdReport,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if config_json.is_null() {
            return Err(Fail::Null("config_json"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|e| Error::Parse(format!("config is not UTF-8: {e}")))?;
        let cfg = ExperimentConfig::from_json(text)?;
        *out = boxed(GdReport(experiment::run(&cfg)?));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gd_report_free(r: *mut GdReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Per-epoch metrics in CSV form; free with `gd_string_free`.
///
/// # Safety
/// `r` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_report_metrics_csv(
    r: *const GdReport,
    out: *mut *mut c_char,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = c_string(deref(r, "report")?.0.report.metrics_csv());
        Ok(())
    })
}

/// Summary document as JSON; free with `gd_string_free`.
///
/// # Safety
/// `r` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_report_summary_json(
    r: *const GdReport,
    out: *mut *mut c_char,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = c_string(deref(r, "report")?.0.summary.to_json());
        Ok(())
    })
}

/// Final test accuracy and whether every binarized mask met its budget.
///
/// # Safety
/// `r` must be live; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_report_final(
    r: *const GdReport,
    val_accuracy: *mut f64,
    feasible: *mut bool,
) -> GdStatus {
    guard(|| {
        let acc = out_ptr(val_accuracy, "val_accuracy")?;
        let feasible = out_ptr(feasible, "feasible")?;
        let s = &deref(r, "report")?.0.summary;
        *acc = s.final_record.val_accuracy;
        *feasible = s.feasible;
        Ok(())
    })
}

/// Binarized mask of `layer`/`channel` from a finished run.
///
/// # Safety
/// `r` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_report_mask(
    r: *const GdReport,
    layer: usize,
    channel: usize,
    out: *mut *mut GdTensor,
) -> GdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = &deref(r, "report")?.0.summary;
        let m = s.mask(layer, channel).ok_or_else(|| {
            Error::InvalidArgument(format!("no mask at layer {layer} channel {channel}"))
        })?;
        *out = boxed(GdTensor(m.binary.clone()));
        Ok(())
    })
}

/// Runs the full gradient suite. Writes the worst relative error and the
/// number of failing (case, seed) pairs.
///
/// # Safety
/// Outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn gd_gradcheck_all(max_error: *mut f64, failures: *mut usize) -> GdStatus {
    guard(|| {
        let max_error = out_ptr(max_error, "max_error")?;
        let failures = out_ptr(failures, "failures")?;
        let report = run_suite(&standard_cases(), Scope::All, SEEDS);
        *max_error = report
            .outcomes
            .iter()
            .map(|o| o.max_error)
            .fold(0.0, f64::max);
        *failures = report.failures.len();
        Ok(())
    })
}
