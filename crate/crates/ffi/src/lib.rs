//! C ABI over the survbench core.
//!
//! Every fallible function returns an [`SbStatus`]; on failure the message is
//! available from [`sb_last_error`] on the same thread. Datasets and models
//! are opaque handles released with their `_free` function. Strings returned
//! through `char **` are released with [`sb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::slice;

use survbench::cli::model_params;
use survbench::cox_objective::{build_risk_index, grad_hess, partial_log_likelihood};
use survbench::dataset::{load_csv, FeatureMatrix, SurvivalDataset};
use survbench::harness::FittedModel;
use survbench::metrics::{harrell_c, uno_c};
use survbench::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque dataset handle.
pub struct SbDataset {
    inner: SurvivalDataset,
}

/// Opaque fitted-model handle.
pub struct SbModel {
    inner: FittedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> SbStatus {
    match err {
        Error::InvalidArgument(_) => SbStatus::InvalidArgument,
        Error::Numerical(_) | Error::NotConverged { .. } => SbStatus::Numerical,
        Error::Io(_) => SbStatus::Io,
        _ => SbStatus::Validation,
    }
}

struct Fail(SbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SbStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SbStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn events(e: &[u8]) -> Vec<bool> {
    e.iter().map(|v| *v != 0).collect()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a CSV with `time` and `event` columns.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_load_csv(path: *const c_char, out: *mut *mut SbDataset) -> SbStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = load_csv(path)?;
        *out = Box::into_raw(Box::new(SbDataset { inner: ds }));
        Ok(())
    })
}

/// Builds a dataset from a column-major feature block. Column kinds are
/// inferred; `NaN` marks a missing value. `names` holds `n_cols` strings.
///
/// # Safety
/// All pointers must reference arrays of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_from_arrays(
    x_col_major: *const f64,
    n_rows: usize,
    n_cols: usize,
    names: *const *const c_char,
    time: *const f64,
    event: *const u8,
    out: *mut *mut SbDataset,
) -> SbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let x = input(x_col_major, n_rows * n_cols, "x")?;
        let name_ptrs = input(names, n_cols, "names")?;
        let names = name_ptrs
            .iter()
            .map(|p| text(*p, "name").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let columns = (0..n_cols).map(|j| x[j * n_rows..(j + 1) * n_rows].to_vec()).collect();
        let fm = FeatureMatrix::new(names, columns)?;
        let time = input(time, n_rows, "time")?.to_vec();
        let event = events(input(event, n_rows, "event")?);
        let ds = SurvivalDataset::with_inferred_kinds(fm, time, event)?;
        *out = Box::into_raw(Box::new(SbDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_n_rows(ds: *const SbDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n_rows())
}

/// # Safety
/// `ds` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_n_cols(ds: *const SbDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.features.n_cols())
}

/// # Safety
/// `ds` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_dataset_free(ds: *mut SbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Cox loss (negative mean partial log-likelihood), gradient and diagonal
/// hessian of the log-likelihood with respect to `eta`, in input row order.
///
/// # Safety
/// Input arrays hold `n` values; `grad` and `hess` have room for `n`.
#[no_mangle]
pub unsafe extern "C" fn sb_cox_grad_hess(
    time: *const f64,
    event: *const u8,
    eta: *const f64,
    n: usize,
    grad: *mut f64,
    hess: *mut f64,
    loss: *mut f64,
) -> SbStatus {
    guard(|| {
        let idx = build_risk_index(input(time, n, "time")?, &events(input(event, n, "event")?))?;
        let out = grad_hess(&idx, input(eta, n, "eta")?)?;
        output(grad, n, "grad")?.copy_from_slice(&out.grad);
        output(hess, n, "hess")?.copy_from_slice(&out.hess);
        *loss.as_mut().ok_or_else(|| null("loss"))? = out.loss;
        Ok(())
    })
}

/// Breslow partial log-likelihood.
///
/// # Safety
/// Input arrays hold `n` values; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_partial_log_likelihood(
    time: *const f64,
    event: *const u8,
    eta: *const f64,
    n: usize,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let idx = build_risk_index(input(time, n, "time")?, &events(input(event, n, "event")?))?;
        *out.as_mut().ok_or_else(|| null("out"))? = partial_log_likelihood(&idx, input(eta, n, "eta")?)?;
        Ok(())
    })
}

/// # Safety
/// Input arrays hold `n` values; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_harrell_c(
    time: *const f64,
    event: *const u8,
    risk: *const f64,
    n: usize,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let c = harrell_c(input(time, n, "time")?, &events(input(event, n, "event")?), input(risk, n, "risk")?)?;
        *out.as_mut().ok_or_else(|| null("out"))? = c;
        Ok(())
    })
}

/// Uno's C truncated at `tau` with censoring weights from the training split.
///
/// # Safety
/// Arrays hold `n_train` or `n_test` values; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_uno_c(
    train_time: *const f64,
    train_event: *const u8,
    n_train: usize,
    test_time: *const f64,
    test_event: *const u8,
    test_risk: *const f64,
    n_test: usize,
    tau: f64,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let c = uno_c(
            input(train_time, n_train, "train_time")?,
            &events(input(train_event, n_train, "train_event")?),
            input(test_time, n_test, "test_time")?,
            &events(input(test_event, n_test, "test_event")?),
            input(test_risk, n_test, "test_risk")?,
            tau,
        )?;
        *out.as_mut().ok_or_else(|| null("out"))? = c;
        Ok(())
    })
}

/// Fits a model. `kind` is one of `cox_plain`, `cox_ridge`, `cox_lasso`,
/// `cox_elastic_net`, `rsf`, `gbt_leaf_wise`, `gbt_depth_wise`, `mlp`;
/// `params_json` is a JSON object of hyperparameters or null for none.
///
/// # Safety
/// Strings are NUL-terminated; `ds` is a live handle; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn sb_model_fit(
    kind: *const c_char,
    params_json: *const c_char,
    ds: *const SbDataset,
    seed: u64,
    out: *mut *mut SbModel,
) -> SbStatus {
    guard(|| {
        let kind = text(kind, "kind")?;
        let params = if params_json.is_null() {
            serde_json::Value::Object(Default::default())
        } else {
            serde_json::from_str(text(params_json, "params_json")?)
                .map_err(|e| Fail(SbStatus::InvalidArgument, format!("params_json: {e}")))?
        };
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = model_params(kind, params)?.fit(&ds.inner, seed)?;
        *out = Box::into_raw(Box::new(SbModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `json` is NUL-terminated; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn sb_model_from_json(json: *const c_char, out: *mut *mut SbModel) -> SbStatus {
    guard(|| {
        let model = FittedModel::from_json(text(json, "json")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(SbModel { inner: model }));
        Ok(())
    })
}

/// Serializes a model; release the string with [`sb_string_free`].
///
/// # Safety
/// `model` is a live handle; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn sb_model_to_json(model: *const SbModel, out: *mut *mut c_char) -> SbStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = CString::new(model.inner.to_json()?)
            .map_err(|_| Fail(SbStatus::Validation, "model JSON contains NUL".into()))?;
        *out = json.into_raw();
        Ok(())
    })
}

/// Risk scores for every row of `ds`, matched to the model's columns by name.
///
/// # Safety
/// Handles are live; `out` has room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn sb_model_predict(
    model: *const SbModel,
    ds: *const SbDataset,
    out: *mut f64,
    out_len: usize,
) -> SbStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("ds"))?;
        if out_len != ds.inner.n_rows() {
            return Err(Fail(
                SbStatus::InvalidArgument,
                format!("out_len {out_len} does not match {} rows", ds.inner.n_rows()),
            ));
        }
        let risk = model.inner.predict(&ds.inner.features)?;
        output(out, out_len, "out")?.copy_from_slice(&risk);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_model_free(model: *mut SbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
