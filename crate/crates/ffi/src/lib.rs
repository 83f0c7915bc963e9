//! C ABI for the clover core: hierarchy handles, sample-based scores and
//! coherent factor-model sampling.
//!
//! Every function returns a [`CloverStatus`]; results go through out
//! pointers. On failure, [`clover_last_error`] copies a message for the
//! calling thread. Arrays are row-major `f64` buffers with explicit lengths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use clover::factor::{draw_noise, sample, FactorParams};
use clover::hierarchy::{AggregationMatrix, HierarchySpec};
use clover::scoring;
use clover::tensor::Tape;
use clover::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloverStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InvalidHierarchy = 4,
    DataError = 5,
    NumericalFailure = 6,
    IoError = 7,
    Utf8Error = 8,
    Panic = 9,
}

/// Opaque aggregation matrix built from a hierarchy description.
pub struct CloverHierarchy {
    s: AggregationMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CloverStatus {
    match e {
        Error::Shape { .. } => CloverStatus::ShapeMismatch,
        Error::Hierarchy(_) => CloverStatus::InvalidHierarchy,
        Error::InvalidArgument(_) | Error::Config(_) => CloverStatus::InvalidArgument,
        Error::Data(_) | Error::Csv(_) | Error::Json(_) => CloverStatus::DataError,
        Error::Numerical(_) => CloverStatus::NumericalFailure,
        Error::Io(_) => CloverStatus::IoError,
    }
}

struct Failure(CloverStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CloverStatus::NullPointer, format!("{} is null", what))
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CloverStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CloverStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CloverStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = value;
    Ok(())
}

fn check_len(op: &str, got: usize, want: usize) -> Result<(), Failure> {
    if got != want {
        return Err(Failure(CloverStatus::ShapeMismatch, format!("{}: buffer holds {} values, {} required", op, got, want)));
    }
    Ok(())
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn clover_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Parse a TOML hierarchy description and build its aggregation matrix.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clover_hierarchy_from_toml(toml: *const c_char, out: *mut *mut CloverHierarchy) -> CloverStatus {
    guard(|| {
        if toml.is_null() {
            return Err(null("toml"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| Failure(CloverStatus::Utf8Error, e.to_string()))?;
        let spec = HierarchySpec::from_toml_str(text)?;
        let s = AggregationMatrix::build(&spec)?;
        *out = Box::into_raw(Box::new(CloverHierarchy { s }));
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `h` must come from [`clover_hierarchy_from_toml`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn clover_hierarchy_free(h: *mut CloverHierarchy) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn handle<'a>(h: *const CloverHierarchy) -> Result<&'a AggregationMatrix, Failure> {
    h.as_ref().map(|h| &h.s).ok_or_else(|| null("hierarchy"))
}

/// Number of hierarchy rows and bottom series.
///
/// # Safety
/// `h` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn clover_hierarchy_dims(h: *const CloverHierarchy, n_rows: *mut usize, n_bottom: *mut usize) -> CloverStatus {
    guard(|| {
        let s = handle(h)?;
        write(n_rows, s.n_rows(), "n_rows")?;
        write(n_bottom, s.n_bottom(), "n_bottom")
    })
}

/// Copy the `n_rows × n_bottom` 0/1 matrix into `out`.
///
/// # Safety
/// `out` must be valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn clover_hierarchy_matrix(h: *const CloverHierarchy, out: *mut f64, len: usize) -> CloverStatus {
    guard(|| {
        let s = handle(h)?;
        check_len("matrix", len, s.as_slice().len())?;
        slice_mut(out, len, "out")?.copy_from_slice(s.as_slice());
        Ok(())
    })
}

/// Aggregate `[n_bottom, width]` bottom values to `[n_rows, width]`.
///
/// # Safety
/// Buffers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn clover_hierarchy_aggregate(
    h: *const CloverHierarchy,
    bottom: *const f64,
    bottom_len: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> CloverStatus {
    guard(|| {
        let s = handle(h)?;
        check_len("aggregate input", bottom_len, s.n_bottom() * width)?;
        check_len("aggregate output", out_len, s.n_rows() * width)?;
        let all = s.aggregate(slice(bottom, bottom_len, "bottom")?, width)?;
        slice_mut(out, out_len, "out")?.copy_from_slice(&all);
        Ok(())
    })
}

/// Fair sample CRPS of `n` samples against `y`.
///
/// # Safety
/// `samples` must be valid for `n` values; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clover_crps(y: f64, samples: *const f64, n: usize, out: *mut f64) -> CloverStatus {
    guard(|| {
        let v = scoring::crps_empirical(y, slice(samples, n, "samples")?)?;
        write(out, v, "out")
    })
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clover_crps_normal(y: f64, mu: f64, sigma: f64, out: *mut f64) -> CloverStatus {
    guard(|| write(out, scoring::crps_normal(y, mu, sigma)?, "out"))
}

/// Pinball loss at level `q`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clover_quantile_loss(y: f64, q: f64, pred: f64, out: *mut f64) -> CloverStatus {
    guard(|| write(out, scoring::quantile_loss(y, q, pred)?, "out"))
}

/// Fair energy score of `[dim, n]` samples (one column per sample) against `y[dim]`.
///
/// # Safety
/// `y` must be valid for `dim` values, `samples` for `dim * n`.
#[no_mangle]
pub unsafe extern "C" fn clover_energy_score(
    y: *const f64,
    dim: usize,
    samples: *const f64,
    n: usize,
    beta: f64,
    out: *mut f64,
) -> CloverStatus {
    guard(|| {
        let total = dim.checked_mul(n).ok_or_else(|| Failure(CloverStatus::InvalidArgument, "dim * n overflows".into()))?;
        let v = scoring::energy_score(slice(y, dim, "y")?, slice(samples, total, "samples")?, beta)?;
        write(out, v, "out")
    })
}

/// Draw coherent samples from the factor model.
///
/// `mu` and `sigma` are `[n_bottom, n_horizons]`, `loadings` is
/// `[n_bottom, n_factors, n_horizons]`; `out` receives
/// `[n_rows, n_horizons, n_samples]`. Deterministic in `seed`.
///
/// # Safety
/// Buffers must be valid for the lengths implied by the dimensions.
#[no_mangle]
pub unsafe extern "C" fn clover_factor_sample(
    h: *const CloverHierarchy,
    mu: *const f64,
    sigma: *const f64,
    loadings: *const f64,
    n_factors: usize,
    n_horizons: usize,
    n_samples: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> CloverStatus {
    guard(|| {
        let s = handle(h)?;
        let nb = s.n_bottom();
        let cells = nb * n_horizons;
        check_len("samples output", out_len, s.n_rows() * n_horizons * n_samples)?;
        let tape = Tape::new();
        let params = FactorParams::constant(
            &tape,
            (nb, n_factors, n_horizons),
            slice(mu, cells, "mu")?.to_vec(),
            slice(sigma, cells, "sigma")?.to_vec(),
            slice(loadings, cells * n_factors, "loadings")?.to_vec(),
        )?;
        let noise = draw_noise(nb, n_factors, n_horizons, n_samples, seed)?;
        let block = sample(&params, &noise, s)?.coherent_block();
        slice_mut(out, out_len, "out")?.copy_from_slice(&block.values);
        Ok(())
    })
}
