//! C ABI over the `rtp-lab` numerics.
//!
//! Every function returns an [`RtpStatus`]; results are written through
//! out-pointers. On failure the message is available from
//! [`rtp_last_error_message`] on the same thread. Sampled spectra live behind
//! the opaque [`RtpSpectrum`] handle, released with [`rtp_spectrum_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use rtp_lab::eigensolve::EmpiricalSpectrum;
use rtp_lab::general_mp::{solve_ie, DiscreteMeasure, SolveOptions};
use rtp_lab::metrics::ks_distance;
use rtp_lab::moments::exact_norm_variance;
use rtp_lab::mp_law::{mp_cdf, mp_density, mp_stieltjes, MpLaw};
use rtp_lab::tensor_model::{binomial, sample_matrix, ModelParams, MomentModel};
use rtp_lab::{ComplexValue, Error};

/// Status codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtpStatus {
    Ok = 0,
    Validation = 1,
    Domain = 2,
    Overflow = 3,
    Resource = 4,
    Numeric = 5,
    NonConvergence = 6,
    Invariant = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<&Error> for RtpStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Validation(_) => RtpStatus::Validation,
            Error::Domain(_) => RtpStatus::Domain,
            Error::Overflow { .. } => RtpStatus::Overflow,
            Error::Resource { .. } => RtpStatus::Resource,
            Error::Numeric(_) => RtpStatus::Numeric,
            Error::NonConvergence { .. } => RtpStatus::NonConvergence,
            Error::Invariant(_) => RtpStatus::Invariant,
        }
    }
}

/// A sampled empirical spectrum, eigenvalues in ascending order.
pub struct RtpSpectrum {
    spectrum: EmpiricalSpectrum,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> RtpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RtpStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            let status = RtpStatus::from(&e);
            set_last_error(e.to_string());
            status
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer passed for {what}"));
            RtpStatus::NullPointer
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            RtpStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for writes.
unsafe fn write<T>(p: *mut T, value: T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    unsafe { p.write(value) };
    Ok(())
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

/// Message of the last failure on this thread, or an empty string.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rtp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// `C(n, k)`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_binomial(n: u64, k: u64, out: *mut u64) -> RtpStatus {
    guard(|| unsafe { write(out, binomial(n, k)?, "out") })
}

/// Marchenko–Pastur density of ratio `gamma` at `y`, excluding the atom.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_mp_density(gamma: f64, y: f64, out: *mut f64) -> RtpStatus {
    guard(|| unsafe { write(out, mp_density(gamma, y)?, "out") })
}

/// Marchenko–Pastur distribution function, including the atom at zero.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_mp_cdf(gamma: f64, x: f64, out: *mut f64) -> RtpStatus {
    guard(|| unsafe { write(out, mp_cdf(gamma, x)?, "out") })
}

/// `m(z) = ∫ dF(t) / (z - t)` for `Im z > 0`.
///
/// # Safety
/// `out_re` and `out_im` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_mp_stieltjes(
    gamma: f64,
    z_re: f64,
    z_im: f64,
    out_re: *mut f64,
    out_im: *mut f64,
) -> RtpStatus {
    guard(|| {
        let m = mp_stieltjes(gamma, ComplexValue::new(z_re, z_im))?;
        unsafe {
            write(out_re, m.re, "out_re")?;
            write(out_im, m.im, "out_im")
        }
    })
}

/// Solves the fixed-point equation for the limit of a population with
/// eigenvalue distribution `sum_i weights[i] δ_{atoms[i]}`, at `z`.
///
/// # Safety
/// `atoms` and `weights` must point to `len` values; the out-pointers must be
/// valid for writes, except `out_iterations`, which may be null.
#[no_mangle]
pub unsafe extern "C" fn rtp_solve_ie(
    atoms: *const f64,
    weights: *const f64,
    len: usize,
    gamma: f64,
    z_re: f64,
    z_im: f64,
    out_re: *mut f64,
    out_im: *mut f64,
    out_iterations: *mut usize,
) -> RtpStatus {
    guard(|| {
        let atoms = unsafe { slice(atoms, len, "atoms")? };
        let weights = unsafe { slice(weights, len, "weights")? };
        let h = DiscreteMeasure::new(atoms.to_vec(), weights.to_vec())?;
        let opts = SolveOptions {
            im_floor: z_im.min(SolveOptions::default().im_floor),
            ..SolveOptions::default()
        };
        let fix = solve_ie(&h, gamma, ComplexValue::new(z_re, z_im), &opts)?;
        unsafe {
            write(out_re, fix.m.re, "out_re")?;
            write(out_im, fix.m.im, "out_im")?;
            if !out_iterations.is_null() {
                out_iterations.write(fix.iterations);
            }
        }
        Ok(())
    })
}

/// `Var ||Z_0||^2` for degree `d` over `n` variables with fourth moment `b`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_exact_norm_variance(n: usize, d: usize, b: f64, out: *mut f64) -> RtpStatus {
    guard(|| unsafe { write(out, exact_norm_variance(n, d, b)?, "out") })
}

/// Samples `Z` (N x p, N = C(n, d)) and stores the spectrum of `Z Z^T / p`.
/// `dist` is `"rademacher"`, `"gaussian"` or `"threepoint:B"`; a zero
/// `max_entries` selects the default cap.
///
/// # Safety
/// `dist` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_spectrum_sample(
    n: usize,
    d: usize,
    p: usize,
    dist: *const c_char,
    seed: u64,
    max_entries: u64,
    out: *mut *mut RtpSpectrum,
) -> RtpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        if dist.is_null() {
            return Err(Failure::Null("dist"));
        }
        let name = unsafe { CStr::from_ptr(dist) }
            .to_str()
            .map_err(|_| Error::Validation("dist is not UTF-8".into()))?;
        let model: MomentModel = name.parse()?;
        let params = ModelParams::new(n, d, p)?;
        let cap = if max_entries == 0 {
            rtp_lab::tensor_model::DEFAULT_MAX_ENTRIES
        } else {
            max_entries
        };
        let z = sample_matrix(&params, &model, seed, cap)?;
        let spectrum = EmpiricalSpectrum::of_covariance(&z)?;
        unsafe { out.write(Box::into_raw(Box::new(RtpSpectrum { spectrum }))) };
        Ok(())
    })
}

/// Number of eigenvalues, or 0 for a null handle.
///
/// # Safety
/// `spectrum` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rtp_spectrum_len(spectrum: *const RtpSpectrum) -> usize {
    unsafe { spectrum.as_ref() }.map_or(0, |s| s.spectrum.len())
}

/// Copies up to `capacity` eigenvalues into `buf` and reports how many were written.
///
/// # Safety
/// `spectrum` must be a live handle, `buf` valid for `capacity` writes and
/// `written` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_spectrum_copy(
    spectrum: *const RtpSpectrum,
    buf: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> RtpStatus {
    guard(|| {
        let s = unsafe { spectrum.as_ref() }.ok_or(Failure::Null("spectrum"))?;
        let values = s.spectrum.eigenvalues();
        let count = values.len().min(capacity);
        if count > 0 {
            if buf.is_null() {
                return Err(Failure::Null("buf"));
            }
            unsafe { ptr::copy_nonoverlapping(values.as_ptr(), buf, count) };
        }
        unsafe { write(written, count, "written") }
    })
}

/// Kolmogorov–Smirnov distance from the spectrum to Marchenko–Pastur with ratio `gamma`.
///
/// # Safety
/// `spectrum` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rtp_spectrum_ks_to_mp(
    spectrum: *const RtpSpectrum,
    gamma: f64,
    out: *mut f64,
) -> RtpStatus {
    guard(|| {
        let s = unsafe { spectrum.as_ref() }.ok_or(Failure::Null("spectrum"))?;
        let law = MpLaw::new(gamma)?;
        unsafe { write(out, ks_distance(&s.spectrum, &law), "out") }
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `spectrum` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rtp_spectrum_free(spectrum: *mut RtpSpectrum) {
    if !spectrum.is_null() {
        drop(unsafe { Box::from_raw(spectrum) });
    }
}
