//! C ABI over `recurstrat`.
//!
//! Every entry point returns an [`RsStatus`]; on failure a message is kept in
//! thread-local storage and can be read with [`rs_last_error`]. Handles are
//! opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use recurstrat::census_fit::{fit_census, CensusConfig, Membership};
use recurstrat::data::{CensusTable, CohortDataset};
use recurstrat::error::Error;
use recurstrat::io::{read_census, read_cohort, FitRecord};
use recurstrat::model::ModelCell;
use recurstrat::simulate::{build_census, extract_cohort, scenario, simulate_population};
use recurstrat::zt::{em_fit, EmConfig};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    /// The fit handle is still produced; see [`rs_fit_converged`].
    NotConverged = 5,
    Panic = 6,
}

/// Cohort of subjects with at least one in-window event.
pub struct RsDataset {
    inner: CohortDataset,
}

/// Yearly census counts by covariate cell.
pub struct RsCensus {
    inner: CensusTable,
}

/// Fitted model.
pub struct RsFit {
    inner: FitRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(RsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::Csv(_) | Error::Schema { .. } | Error::DuplicateEvent { .. } => RsStatus::Io,
            Error::SingularHessian { .. }
            | Error::LineSearch { .. }
            | Error::NonFinite(_)
            | Error::ZeroTruncationFactor { .. }
            | Error::CensusSupportHole { .. }
            | Error::TooManyDroppedDraws { .. } => RsStatus::Numeric,
            _ => RsStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(RsStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<RsStatus, Failure>) -> RsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            RsStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(RsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

fn cell(s: &str) -> Result<ModelCell, Failure> {
    Ok(s.parse::<ModelCell>()?)
}

/// Message of the last failed call on this thread, or null.
///
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Simulates a preset scenario (1, 2 or 3) and returns its cohort and census.
///
/// # Safety
/// `cohort_out` and `census_out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rs_simulate(
    scenario_id: u8,
    population: usize,
    seed: u64,
    cohort_out: *mut *mut RsDataset,
    census_out: *mut *mut RsCensus,
) -> RsStatus {
    guard(|| {
        if cohort_out.is_null() || census_out.is_null() {
            return Err(null("output pointer"));
        }
        let mut sc = scenario(scenario_id)?;
        sc.population_size = population;
        sc.seed = seed;
        let pop = simulate_population(&sc)?;
        let cohort = extract_cohort(&pop, sc.window);
        let census = build_census(&pop, sc.window)?;
        put(cohort_out, RsDataset { inner: cohort });
        put(census_out, RsCensus { inner: census });
        Ok(RsStatus::Ok)
    })
}

/// Reads a cohort from subject and event CSV files.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_load(
    subjects: *const c_char,
    events: *const c_char,
    horizon: f64,
    out: *mut *mut RsDataset,
) -> RsStatus {
    guard(|| {
        let (s, e) = (text(subjects, "subjects")?, text(events, "events")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_cohort(Path::new(s), Path::new(e), horizon)?;
        put(out, RsDataset { inner });
        Ok(RsStatus::Ok)
    })
}

/// Reads a census CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rs_census_load(path: *const c_char, horizon: f64, out: *mut *mut RsCensus) -> RsStatus {
    guard(|| {
        let p = text(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_census(Path::new(p), horizon)?;
        put(out, RsCensus { inner });
        Ok(RsStatus::Ok)
    })
}

/// Number of subjects, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_len(data: *const RsDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.len())
}

fn finish(fit: FitRecord, out: *mut *mut RsFit) -> RsStatus {
    let converged = fit.converged();
    // SAFETY: checked non-null by the callers.
    unsafe { put(out, RsFit { inner: fit }) };
    if converged {
        RsStatus::Ok
    } else {
        set_error("fit did not converge");
        RsStatus::NotConverged
    }
}

/// Census-augmented fit of a model cell such as `"ssc"` or `"nnv"`.
///
/// # Safety
/// Handles must be live; `model` NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_census(
    data: *const RsDataset,
    census: *const RsCensus,
    model: *const c_char,
    out: *mut *mut RsFit,
) -> RsStatus {
    guard(|| {
        let d = borrow(data, "data")?;
        let c = borrow(census, "census")?;
        let m = cell(text(model, "model")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fit = fit_census(&d.inner, &c.inner, m, Membership::Posterior, &CensusConfig::default())?;
        Ok(finish(FitRecord::Census(fit), out))
    })
}

/// Zero-truncated EM fit of a constant-baseline model cell.
///
/// # Safety
/// `data` must be live; `model` NUL-terminated; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_zt(data: *const RsDataset, model: *const c_char, out: *mut *mut RsFit) -> RsStatus {
    guard(|| {
        let d = borrow(data, "data")?;
        let m = cell(text(model, "model")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fit = em_fit(&d.inner, m, &EmConfig::default())?;
        Ok(finish(FitRecord::Zt(fit), out))
    })
}

/// Non-zero when the fit converged.
///
/// # Safety
/// `fit` must be null or a live fit handle.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_converged(fit: *const RsFit) -> i32 {
    fit.as_ref().map_or(0, |f| i32::from(f.inner.converged()))
}

fn strata(f: &FitRecord) -> usize {
    if f.model().is_unstratified() {
        1
    } else {
        2
    }
}

/// Copies the coefficients of `stratum` (0 or 1) into `out[0..len]`.
///
/// `written` receives the number of coefficients; if `len` is smaller,
/// nothing is copied and `RS_STATUS_INVALID_ARGUMENT` is returned.
///
/// # Safety
/// `fit` must be live; `out` valid for `len` writes; `written` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_beta(
    fit: *const RsFit,
    stratum: usize,
    out: *mut f64,
    len: usize,
    written: *mut usize,
) -> RsStatus {
    guard(|| {
        let f = &borrow(fit, "fit")?.inner;
        if out.is_null() || written.is_null() {
            return Err(null("output pointer"));
        }
        if stratum >= strata(f) {
            return Err(Failure(RsStatus::InvalidArgument, format!("stratum {stratum} out of range")));
        }
        let beta: &[f64] = match f {
            FitRecord::Zt(z) | FitRecord::ZtKnown(z) => &z.beta[stratum],
            FitRecord::Census(c) | FitRecord::Ideal(c) => &c.beta[stratum],
        };
        *written = beta.len();
        if len < beta.len() {
            return Err(Failure(RsStatus::InvalidArgument, format!("buffer holds {len}, need {}", beta.len())));
        }
        ptr::copy_nonoverlapping(beta.as_ptr(), out, beta.len());
        Ok(RsStatus::Ok)
    })
}

/// Cumulative baseline of `stratum` at `age`.
///
/// # Safety
/// `fit` must be live; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_baseline_cumulative(fit: *const RsFit, stratum: usize, age: f64, out: *mut f64) -> RsStatus {
    guard(|| {
        let f = &borrow(fit, "fit")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let b = f.baselines();
        let base = b
            .get(stratum)
            .ok_or_else(|| Failure(RsStatus::InvalidArgument, format!("stratum {stratum} out of range")))?;
        if !age.is_finite() {
            return Err(Failure(RsStatus::InvalidArgument, "age must be finite".into()));
        }
        *out = base.cumulative(age);
        Ok(RsStatus::Ok)
    })
}

/// JSON serialization of the fit; release with [`rs_string_free`].
///
/// # Safety
/// `fit` must be live; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_to_json(fit: *const RsFit, out: *mut *mut c_char) -> RsStatus {
    guard(|| {
        let f = &borrow(fit, "fit")?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = f.to_json()?;
        *out = CString::new(s)
            .map_err(|_| Failure(RsStatus::Numeric, "JSON contains NUL".into()))?
            .into_raw();
        Ok(RsStatus::Ok)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `p` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rs_dataset_free(p: *mut RsDataset) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rs_census_free(p: *mut RsCensus) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn rs_fit_free(p: *mut RsFit) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}
