//! C ABI surface for the take-up model toolkit.
//!
//! Conventions: opaque handles with `_new`/`_free` pairs, status-code returns
//! with results through out-pointers, and a thread-local last-error message.
//! The companion header lives at `include/takeup.h` and is maintained by hand
//! to match this file.

// C-style identifiers on the exported types, mirroring the header.
#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;

use takeup_core::counterfactual::{run_counterfactual, PolicyKind, PolicySpec};
use takeup_core::model::{
    attention_prob, choice_prob, transition_prob, CovariateSpec, Covariates, ParameterSet,
};
use takeup_core::simulator::{simulated_covariate_spec, SimConfig};
use takeup_core::Error;

/// Status codes mirrored in `include/takeup.h`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum takeup_status {
    TAKEUP_OK = 0,
    TAKEUP_ERR_NULL_POINTER = 1,
    TAKEUP_ERR_INVALID_ARGUMENT = 2,
    TAKEUP_ERR_NUMERICAL = 3,
}

use takeup_status::*;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let cstring = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn status_of(e: &Error) -> takeup_status {
    match e {
        Error::Validation(_)
        | Error::MissingCovariate { .. }
        | Error::Config(_)
        | Error::CsvParse { .. }
        | Error::Io(_)
        | Error::Csv(_) => TAKEUP_ERR_INVALID_ARGUMENT,
        _ => TAKEUP_ERR_NUMERICAL,
    }
}

fn fail(e: &Error) -> takeup_status {
    set_last_error(&e.to_string());
    status_of(e)
}

/// Opaque model handle: covariate layout, coefficients, and one evaluation
/// cell the probability calls read from.
pub struct takeup_model {
    spec: CovariateSpec,
    params: ParameterSet,
    cell: Covariates,
}

/// Last error message raised on this thread, or NULL. The pointer stays valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn takeup_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow().as_ref().map_or(std::ptr::null(), |message| message.as_ptr())
    })
}

/// Static version string; never freed by the caller.
#[no_mangle]
pub extern "C" fn takeup_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New model with the reference coefficients and the baseline household cell
/// ($150 benefit, infant present, LA 15, education 2).
#[no_mangle]
pub extern "C" fn takeup_model_new_reference() -> *mut takeup_model {
    let model = takeup_model {
        spec: simulated_covariate_spec(),
        params: ParameterSet::reference(),
        cell: Covariates::from_pairs([
            ("const", 1.0),
            ("log_benefit", 150.0f64.ln()),
            ("no_infant", 0.0),
            ("la", 15.0),
            ("education", 2.0),
        ]),
    };
    Box::into_raw(Box::new(model))
}

/// Frees a model handle; NULL is a no-op.
#[no_mangle]
pub extern "C" fn takeup_model_free(model: *mut takeup_model) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Overwrites one covariate of the model's evaluation cell.
///
/// # Safety
/// `model` must be a live handle from [`takeup_model_new_reference`] and
/// `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn takeup_model_set_covariate(
    model: *mut takeup_model,
    name: *const c_char,
    value: f64,
) -> takeup_status {
    if model.is_null() || name.is_null() {
        set_last_error("null pointer argument");
        return TAKEUP_ERR_NULL_POINTER;
    }
    let Ok(name) = CStr::from_ptr(name).to_str() else {
        set_last_error("covariate name is not valid UTF-8");
        return TAKEUP_ERR_INVALID_ARGUMENT;
    };
    (*model).cell.set(name, value);
    TAKEUP_OK
}

unsafe fn prob_call(
    model: *const takeup_model,
    out: *mut f64,
    eval: impl FnOnce(&takeup_model) -> Result<f64, Error>,
) -> takeup_status {
    if model.is_null() || out.is_null() {
        set_last_error("null pointer argument");
        return TAKEUP_ERR_NULL_POINTER;
    }
    match eval(&*model) {
        Ok(p) => {
            *out = p;
            TAKEUP_OK
        }
        Err(e) => fail(&e),
    }
}

/// P(attention) at the model's cell; exactly 1 when `d_prev` is nonzero.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn takeup_attention_prob(
    model: *const takeup_model,
    d_prev: i32,
    q: f64,
    out: *mut f64,
) -> takeup_status {
    prob_call(model, out, |m| attention_prob(&m.spec, &m.params, &m.cell, d_prev != 0, q))
}

/// P(choice | attentive) at the model's cell; hassle applies unless the
/// household was enrolled with no recertification due.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn takeup_choice_prob(
    model: *const takeup_model,
    d_prev: i32,
    recert: i32,
    q: f64,
    out: *mut f64,
) -> takeup_status {
    prob_call(model, out, |m| {
        choice_prob(&m.spec, &m.params, &m.cell, d_prev != 0, recert != 0, q)
    })
}

/// Full one-period transition probability P(D_next | D_prev, Z).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn takeup_transition_prob(
    model: *const takeup_model,
    d_prev: i32,
    recert: i32,
    d_next: i32,
    q: f64,
    out: *mut f64,
) -> takeup_status {
    prob_call(model, out, |m| {
        transition_prob(&m.spec, &m.params, &m.cell, d_prev != 0, recert != 0, d_next != 0, q)
    })
}

/// Average take-up of the default simulated population under a policy.
/// `policy` is one of the snake_case kind names ("none", "force_attention",
/// ...); `delta` is the choice-nudge increment and is ignored otherwise.
///
/// # Safety
/// `policy` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn takeup_counterfactual_takeup_rate(
    seed: u64,
    horizon_months: u32,
    policy: *const c_char,
    delta: f64,
    out: *mut f64,
) -> takeup_status {
    if policy.is_null() || out.is_null() {
        set_last_error("null pointer argument");
        return TAKEUP_ERR_NULL_POINTER;
    }
    let Ok(policy) = CStr::from_ptr(policy).to_str() else {
        set_last_error("policy name is not valid UTF-8");
        return TAKEUP_ERR_INVALID_ARGUMENT;
    };
    let kind: PolicyKind = match policy.parse() {
        Ok(kind) => kind,
        Err(e) => return fail(&e),
    };
    let mut config = SimConfig::with_defaults(ParameterSet::reference(), seed);
    config.horizon_months = horizon_months;
    let spec = PolicySpec { kind, nudge_delta: delta, ..PolicySpec::none() };
    match run_counterfactual(&config, &spec) {
        Ok(report) => {
            *out = report.takeup_rate;
            TAKEUP_OK
        }
        Err(e) => fail(&e),
    }
}
