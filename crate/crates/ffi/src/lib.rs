//! C ABI for hyperconc.
//!
//! Handles are opaque and owned by the caller once returned; free them
//! with the matching `*_free` function. Every fallible call returns an
//! [`HcStatus`]; on failure `hc_last_error` describes the problem until the
//! next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use hyperconc::gadgets::CouplingTable;
use hyperconc::oracle;
use hyperconc::protocols::{self, CasePair, PairParams, ProtocolOutcome, Scheme, SchemeParams};
use hyperconc::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcStatus {
    Ok = 0,
    NullPointer = 1,
    /// Parameters violate a norm relation or a case index is out of range.
    InvalidArgument = 2,
    /// A branch or index does not exist.
    OutOfRange = 3,
    /// Verification ran and found a disagreement.
    VerificationFailed = 4,
    Internal = 5,
    Panic = 6,
}

/// Amplitudes and case weights for a run.
pub struct HcParams {
    inner: SchemeParams,
}

/// Result of one protocol run.
pub struct HcOutcome {
    inner: ProtocolOutcome,
    labels: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: HcStatus, msg: impl Into<String>) -> HcStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> HcStatus {
    let status = match e {
        Error::Constraint(_) | Error::Normalization(_) | Error::InvalidCase(_) => HcStatus::InvalidArgument,
        _ => HcStatus::Internal,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> HcStatus) -> HcStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(HcStatus::Panic, "internal panic"),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hc_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Creates parameters with real amplitudes shared by both pairs and the
/// first case of each mixture at weight one.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn hc_params_new_real(
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    epsilon: f64,
    eta: f64,
    out: *mut *mut HcParams,
) -> HcStatus {
    guard(|| {
        if out.is_null() {
            return fail(HcStatus::NullPointer, "out is NULL");
        }
        let p = SchemeParams::shared(PairParams::real(alpha, beta, gamma, delta, epsilon, eta));
        if let Err(e) = p.validate() {
            return from_error(e);
        }
        *out = Box::into_raw(Box::new(HcParams { inner: p }));
        HcStatus::Ok
    })
}

/// Gives the C/D pair its own real amplitudes.
///
/// # Safety
/// `params` must be a live handle from `hc_params_new_real`.
#[no_mangle]
pub unsafe extern "C" fn hc_params_set_cd_real(
    params: *mut HcParams,
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: f64,
    epsilon: f64,
    eta: f64,
) -> HcStatus {
    guard(|| {
        let Some(p) = params.as_mut() else {
            return fail(HcStatus::NullPointer, "params is NULL");
        };
        let mut next = p.inner.clone();
        next.cd = Some(PairParams::real(alpha, beta, gamma, delta, epsilon, eta));
        if let Err(e) = next.validate() {
            return from_error(e);
        }
        p.inner = next;
        HcStatus::Ok
    })
}

/// Sets the four polarization case weights and, if `spatial` is not NULL,
/// the four spatial ones.
///
/// # Safety
/// `params` must be a live handle; `pol` must point to 4 doubles;
/// `spatial` is NULL or points to 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn hc_params_set_weights(params: *mut HcParams, pol: *const f64, spatial: *const f64) -> HcStatus {
    guard(|| {
        let (Some(p), false) = (params.as_mut(), pol.is_null()) else {
            return fail(HcStatus::NullPointer, "params and pol must not be NULL");
        };
        let mut next = p.inner.clone();
        next.pol_weights.copy_from_slice(std::slice::from_raw_parts(pol, 4));
        if !spatial.is_null() {
            next.spatial_weights.copy_from_slice(std::slice::from_raw_parts(spatial, 4));
        }
        if let Err(e) = next.validate() {
            return from_error(e);
        }
        p.inner = next;
        HcStatus::Ok
    })
}

/// # Safety
/// `params` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_params_free(params: *mut HcParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

unsafe fn run_case(params: *const HcParams, scheme: Scheme, case: CasePair, out: *mut *mut HcOutcome) -> HcStatus {
    guard(|| {
        let (Some(p), false) = (params.as_ref(), out.is_null()) else {
            return fail(HcStatus::NullPointer, "params and out must not be NULL");
        };
        match protocols::run(scheme, &p.inner, case, &CouplingTable::default()) {
            Ok(o) => {
                let labels = o
                    .branches
                    .iter()
                    .map(|b| CString::new(b.label()).expect("labels are ASCII"))
                    .collect();
                *out = Box::into_raw(Box::new(HcOutcome { inner: o, labels }));
                HcStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Runs scheme 1 on polarization case pair (`pol_ab`, `pol_cd`), each 1..=4.
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_scheme1_run(
    params: *const HcParams,
    pol_ab: u8,
    pol_cd: u8,
    out: *mut *mut HcOutcome,
) -> HcStatus {
    run_case(params, Scheme::One, CasePair::scheme1(pol_ab, pol_cd), out)
}

/// Runs scheme 2 on one polarization and spatial case per pair, each 1..=4.
///
/// # Safety
/// `params` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_scheme2_run(
    params: *const HcParams,
    pol_ab: u8,
    spatial_ab: u8,
    pol_cd: u8,
    spatial_cd: u8,
    out: *mut *mut HcOutcome,
) -> HcStatus {
    run_case(params, Scheme::Two, CasePair::scheme2(pol_ab, spatial_ab, pol_cd, spatial_cd), out)
}

/// # Safety
/// `outcome` must be a live handle and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_success_probability(outcome: *const HcOutcome, value: *mut f64) -> HcStatus {
    guard(|| match (outcome.as_ref(), value.is_null()) {
        (Some(o), false) => {
            *value = o.inner.success_probability;
            HcStatus::Ok
        }
        _ => fail(HcStatus::NullPointer, "outcome and value must not be NULL"),
    })
}

/// Number of branches, or 0 for NULL.
///
/// # Safety
/// `outcome` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_branch_count(outcome: *const HcOutcome) -> usize {
    outcome.as_ref().map_or(0, |o| o.inner.branches.len())
}

unsafe fn with_branch(
    outcome: *const HcOutcome,
    index: usize,
    f: impl FnOnce(&HcOutcome, usize) -> HcStatus,
) -> HcStatus {
    guard(|| {
        let Some(o) = outcome.as_ref() else {
            return fail(HcStatus::NullPointer, "outcome is NULL");
        };
        if index >= o.inner.branches.len() {
            return fail(
                HcStatus::OutOfRange,
                format!("branch {index} out of range (count {})", o.inner.branches.len()),
            );
        }
        f(o, index)
    })
}

/// # Safety
/// `outcome` must be a live handle and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_branch_probability(
    outcome: *const HcOutcome,
    index: usize,
    value: *mut f64,
) -> HcStatus {
    with_branch(outcome, index, |o, i| {
        if value.is_null() {
            return fail(HcStatus::NullPointer, "value is NULL");
        }
        *value = o.inner.branches[i].probability;
        HcStatus::Ok
    })
}

/// Fidelity of a success branch with the target state. Failure branches
/// give `HC_STATUS_OUT_OF_RANGE`.
///
/// # Safety
/// `outcome` must be a live handle and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_branch_fidelity(outcome: *const HcOutcome, index: usize, value: *mut f64) -> HcStatus {
    with_branch(outcome, index, |o, i| {
        if value.is_null() {
            return fail(HcStatus::NullPointer, "value is NULL");
        }
        match o.inner.branches[i].fidelity {
            Some(f) => {
                *value = f;
                HcStatus::Ok
            }
            None => fail(HcStatus::OutOfRange, format!("branch {i} is not a success branch")),
        }
    })
}

/// 1 for a success branch, 0 otherwise (including bad arguments).
///
/// # Safety
/// `outcome` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_branch_success(outcome: *const HcOutcome, index: usize) -> i32 {
    outcome
        .as_ref()
        .and_then(|o| o.inner.branches.get(index))
        .map_or(0, |b| i32::from(b.success))
}

/// Outcome label; owned by the outcome handle. NULL on bad arguments.
///
/// # Safety
/// `outcome` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_branch_label(outcome: *const HcOutcome, index: usize) -> *const c_char {
    outcome
        .as_ref()
        .and_then(|o| o.labels.get(index))
        .map_or(std::ptr::null(), |c| c.as_ptr())
}

/// # Safety
/// `outcome` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hc_outcome_free(outcome: *mut HcOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}

/// Checks every case of `scheme` (1 or 2) against the dense oracle.
/// Returns `HC_STATUS_VERIFICATION_FAILED` on disagreement; the largest
/// deviations are written either way when the pointers are not NULL.
///
/// # Safety
/// `params` must be a live handle; the output pointers NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn hc_verify(
    params: *const HcParams,
    scheme: u8,
    tolerance: f64,
    max_probability_delta: *mut f64,
    max_trace_distance: *mut f64,
) -> HcStatus {
    guard(|| {
        let Some(p) = params.as_ref() else {
            return fail(HcStatus::NullPointer, "params is NULL");
        };
        let Some(s) = Scheme::from_number(scheme) else {
            return fail(HcStatus::InvalidArgument, format!("scheme must be 1 or 2, got {scheme}"));
        };
        let v = match oracle::verify(s, &p.inner, &CouplingTable::default(), tolerance) {
            Ok(v) => v,
            Err(e) => return from_error(e),
        };
        if !max_probability_delta.is_null() {
            *max_probability_delta = v.max_probability_delta;
        }
        if !max_trace_distance.is_null() {
            *max_trace_distance = v.max_trace_distance;
        }
        if v.pass {
            HcStatus::Ok
        } else {
            fail(
                HcStatus::VerificationFailed,
                format!("{} of {} cases disagree", v.failed_cases, v.cases),
            )
        }
    })
}
