//! C ABI for the heavytail estimators.
//!
//! Every function returns an [`HtStatus`]; results come back through out
//! pointers. Estimates are opaque handles released with their `_free`
//! function. On failure a message is kept per thread and read with
//! [`ht_last_error`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use heavytail::gram::{fit_gram_and_eigenvalues_with, gram_fit_options, EigenEstimates, GramConfig, GramEstimate};
use heavytail::influence::{phi_asym, phi_sq, phi_sym, SmoothInput};
use heavytail::matrix_mean::{fit_matrix_operator_with, MatMomentBounds, MatrixEstimate, MatrixSample, McConfig};
use heavytail::regression::{build_plugin, region_contains, RegionSpec, RegressionBounds, RegressionData};
use heavytail::vector_mean::{estimate_mean_uncentered_with, FitOptions, MeanEstimate, VecMomentBounds, VectorSample};
use heavytail::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Domain = 3,
    EmptySelection = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: HtStatus, msg: impl Into<String>) -> HtStatus {
    set_error(msg.into());
    status
}

fn status_of(e: &Error) -> HtStatus {
    match e {
        Error::Domain(_) => HtStatus::Domain,
        Error::EmptySelection(_) => HtStatus::EmptySelection,
        _ => HtStatus::InvalidInput,
    }
}

/// Runs `f`, mapping errors and panics to a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), HtStatus>) -> HtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HtStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(HtStatus::Panic, msg)
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, HtStatus>;
}

impl<T> OrStatus<T> for heavytail::Result<T> {
    fn or_status(self) -> Result<T, HtStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], HtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HtStatus::NullPointer, format!("{what} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, HtStatus> {
    p.as_ref().ok_or_else(|| fail(HtStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn put<T>(out: *mut T, value: T) -> Result<(), HtStatus> {
    if out.is_null() {
        return Err(fail(HtStatus::NullPointer, "output pointer is NULL"));
    }
    out.write(value);
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), HtStatus> {
    if len < src.len() {
        return Err(fail(HtStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", src.len())));
    }
    if dst.is_null() {
        return Err(fail(HtStatus::NullPointer, "output buffer is NULL"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn rows(m: &[Vec<f64>]) -> Vec<f64> {
    m.concat()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn ht_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Smoothed influence functions at `(m, sigma)`: `kind` 0 is the symmetric
/// one, 1 the one-sided one and 2 the one of the square.
#[no_mangle]
pub unsafe extern "C" fn ht_phi(kind: u32, m: f64, sigma: f64, out: *mut f64) -> HtStatus {
    guard(|| {
        let input = SmoothInput::new(m, sigma).or_status()?;
        let v = match kind {
            0 => phi_sym(input),
            1 => phi_asym(input),
            2 => phi_sq(input),
            k => return Err(fail(HtStatus::InvalidInput, format!("unknown influence kind {k}"))),
        };
        put(out, v)
    })
}

pub struct HtVectorSample(VectorSample);

/// Copies `n * d` row-major values.
#[no_mangle]
pub unsafe extern "C" fn ht_vector_sample_new(
    data: *const f64,
    n: usize,
    d: usize,
    out: *mut *mut HtVectorSample,
) -> HtStatus {
    guard(|| {
        let len = n.checked_mul(d).ok_or_else(|| fail(HtStatus::InvalidInput, "n * d overflows"))?;
        let s = VectorSample::new(slice(data, len, "data")?.to_vec(), n, d).or_status()?;
        put(out, Box::into_raw(Box::new(HtVectorSample(s))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_vector_sample_free(sample: *mut HtVectorSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

pub struct HtMatrixSample(MatrixSample);

/// Copies `n` matrices of shape `p x q`, each flattened row-major.
#[no_mangle]
pub unsafe extern "C" fn ht_matrix_sample_new(
    data: *const f64,
    n: usize,
    p: usize,
    q: usize,
    out: *mut *mut HtMatrixSample,
) -> HtStatus {
    guard(|| {
        let len = n
            .checked_mul(p)
            .and_then(|x| x.checked_mul(q))
            .ok_or_else(|| fail(HtStatus::InvalidInput, "n * p * q overflows"))?;
        let s = MatrixSample::new(slice(data, len, "data")?.to_vec(), n, p, q).or_status()?;
        put(out, Box::into_raw(Box::new(HtMatrixSample(s))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_matrix_sample_free(sample: *mut HtMatrixSample) {
    if !sample.is_null() {
        drop(Box::from_raw(sample));
    }
}

pub struct HtMeanEstimate(MeanEstimate);

/// Mean with `|m_hat - E X| <= radius` with probability `1 - delta` when
/// certified; `v` bounds the directional variance and `t` bounds `E |X|^2`.
#[no_mangle]
pub unsafe extern "C" fn ht_estimate_mean(
    sample: *const HtVectorSample,
    v: f64,
    t: f64,
    delta: f64,
    seed: u64,
    out: *mut *mut HtMeanEstimate,
) -> HtStatus {
    guard(|| {
        let s = handle(sample, "sample")?;
        let bounds = VecMomentBounds::new(v, t).or_status()?;
        let opts = FitOptions { seed, ..FitOptions::default() };
        let est = estimate_mean_uncentered_with(&s.0, bounds, delta, &opts).or_status()?;
        put(out, Box::into_raw(Box::new(HtMeanEstimate(est))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_mean_estimate_dim(est: *const HtMeanEstimate, out: *mut usize) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.m_hat.len()))
}

#[no_mangle]
pub unsafe extern "C" fn ht_mean_estimate_m_hat(est: *const HtMeanEstimate, buf: *mut f64, len: usize) -> HtStatus {
    guard(|| copy_out(&handle(est, "estimate")?.0.m_hat, buf, len))
}

#[no_mangle]
pub unsafe extern "C" fn ht_mean_estimate_radius(est: *const HtMeanEstimate, out: *mut f64) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.radius))
}

#[no_mangle]
pub unsafe extern "C" fn ht_mean_estimate_certified(est: *const HtMeanEstimate, out: *mut bool) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.certified))
}

#[no_mangle]
pub unsafe extern "C" fn ht_mean_estimate_free(est: *mut HtMeanEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Moment bounds of a random matrix `M`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HtMatrixBounds {
    /// `sup E <xi, M theta>^2`
    pub v: f64,
    /// `sup_theta E |M theta|^2`
    pub t: f64,
    /// `sup_xi E |M^T xi|^2`
    pub u: f64,
    /// `E |M|_HS^2`
    pub t_hs: f64,
}

pub struct HtMatrixEstimate(MatrixEstimate);

/// Operator-norm mean with `|m_hat - E M|_op <= op_radius` with probability
/// `1 - delta` when certified.
#[no_mangle]
pub unsafe extern "C" fn ht_fit_matrix_operator(
    sample: *const HtMatrixSample,
    bounds: HtMatrixBounds,
    delta: f64,
    n_draws: usize,
    seed: u64,
    out: *mut *mut HtMatrixEstimate,
) -> HtStatus {
    guard(|| {
        let s = handle(sample, "sample")?;
        let b = MatMomentBounds::new(bounds.v, bounds.t, bounds.u, bounds.t_hs).or_status()?;
        let mc = McConfig::new(n_draws, seed).or_status()?;
        let opts = FitOptions { seed, ..FitOptions::default() };
        let est = fit_matrix_operator_with(&s.0, b, delta, mc, &opts).or_status()?;
        put(out, Box::into_raw(Box::new(HtMatrixEstimate(est))))
    })
}

/// Row-major `p x q` estimate into `buf`.
#[no_mangle]
pub unsafe extern "C" fn ht_matrix_estimate_m_hat(est: *const HtMatrixEstimate, buf: *mut f64, len: usize) -> HtStatus {
    guard(|| copy_out(&rows(&handle(est, "estimate")?.0.m_hat), buf, len))
}

#[no_mangle]
pub unsafe extern "C" fn ht_matrix_estimate_op_radius(est: *const HtMatrixEstimate, out: *mut f64) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.op_radius))
}

#[no_mangle]
pub unsafe extern "C" fn ht_matrix_estimate_mc_stderr(est: *const HtMatrixEstimate, out: *mut f64) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.mc_stderr))
}

#[no_mangle]
pub unsafe extern "C" fn ht_matrix_estimate_certified(est: *const HtMatrixEstimate, out: *mut bool) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.0.certified))
}

#[no_mangle]
pub unsafe extern "C" fn ht_matrix_estimate_free(est: *mut HtMatrixEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

pub struct HtGramEstimate {
    fit: GramEstimate,
    eigen: EigenEstimates,
}

/// Gram estimate and eigenvalue lower estimates given `t_bound >= E |X|^4`.
#[no_mangle]
pub unsafe extern "C" fn ht_fit_gram(
    sample: *const HtVectorSample,
    t_bound: f64,
    delta: f64,
    seed: u64,
    out: *mut *mut HtGramEstimate,
) -> HtStatus {
    guard(|| {
        let s = handle(sample, "sample")?;
        let config = GramConfig::new(t_bound, delta).or_status()?;
        let opts = FitOptions { seed, ..gram_fit_options() };
        let (fit, eigen) = fit_gram_and_eigenvalues_with(&s.0, &config, &opts).or_status()?;
        put(out, Box::into_raw(Box::new(HtGramEstimate { fit, eigen })))
    })
}

/// Row-major `d x d` estimate into `buf`.
#[no_mangle]
pub unsafe extern "C" fn ht_gram_estimate_g_hat(est: *const HtGramEstimate, buf: *mut f64, len: usize) -> HtStatus {
    guard(|| copy_out(&rows(&handle(est, "estimate")?.fit.g_hat), buf, len))
}

/// Eigenvalue lower estimates in decreasing order.
#[no_mangle]
pub unsafe extern "C" fn ht_gram_estimate_sigma_hat(est: *const HtGramEstimate, buf: *mut f64, len: usize) -> HtStatus {
    guard(|| copy_out(&handle(est, "estimate")?.eigen.sigma_hat, buf, len))
}

#[no_mangle]
pub unsafe extern "C" fn ht_gram_estimate_sup_gap(est: *const HtGramEstimate, out: *mut f64) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.fit.sup_gap))
}

#[no_mangle]
pub unsafe extern "C" fn ht_gram_estimate_certified(est: *const HtGramEstimate, out: *mut bool) -> HtStatus {
    guard(|| put(out, handle(est, "estimate")?.fit.certified))
}

#[no_mangle]
pub unsafe extern "C" fn ht_gram_estimate_free(est: *mut HtGramEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Moment bounds of a regression pair `(X, Y)`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HtRegressionBounds {
    /// `sup_theta E <theta, X>^4`
    pub v: f64,
    /// `E |X|^4`
    pub t: f64,
    /// `sup_theta E Y^2 <theta, X>^2`
    pub v_prime: f64,
    /// `E Y^2 |X|^2`
    pub t_prime: f64,
}

pub struct HtRegion(RegionSpec);

/// Robust ridge fit and its confidence region from `n x d` row-major `x`
/// and `n` responses `y`. The region holds with probability `1 - 2 delta`.
#[no_mangle]
pub unsafe extern "C" fn ht_regress(
    x: *const f64,
    y: *const f64,
    n: usize,
    d: usize,
    bounds: HtRegressionBounds,
    lambda: f64,
    delta: f64,
    n_draws: usize,
    seed: u64,
    out: *mut *mut HtRegion,
) -> HtStatus {
    guard(|| {
        let len = n.checked_mul(d).ok_or_else(|| fail(HtStatus::InvalidInput, "n * d overflows"))?;
        let xs = VectorSample::new(slice(x, len, "x")?.to_vec(), n, d).or_status()?;
        let data = RegressionData::new(xs, slice(y, n, "y")?.to_vec()).or_status()?;
        let b = RegressionBounds::new(bounds.v, bounds.t, bounds.v_prime, bounds.t_prime).or_status()?;
        let mc = McConfig::new(n_draws, seed).or_status()?;
        let opts = FitOptions { seed, ..FitOptions::default() };
        let plugin = build_plugin(&data, b, delta, mc, &opts).or_status()?;
        let region = RegionSpec::fit(plugin, lambda, None).or_status()?;
        put(out, Box::into_raw(Box::new(HtRegion(region))))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_region_theta(region: *const HtRegion, buf: *mut f64, len: usize) -> HtStatus {
    guard(|| copy_out(&handle(region, "region")?.0.theta_hat, buf, len))
}

/// Radii of the plug-in Gram matrix (`epsilon`) and cross moment (`eta`).
#[no_mangle]
pub unsafe extern "C" fn ht_region_radii(region: *const HtRegion, epsilon: *mut f64, eta: *mut f64) -> HtStatus {
    guard(|| {
        let r = handle(region, "region")?;
        put(epsilon, r.0.plugin.epsilon)?;
        put(eta, r.0.plugin.eta)
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_region_contains(
    region: *const HtRegion,
    theta: *const f64,
    d: usize,
    out: *mut bool,
) -> HtStatus {
    guard(|| {
        let r = handle(region, "region")?;
        if d != r.0.theta_hat.len() {
            return Err(fail(HtStatus::InvalidInput, format!("expected {} coordinates, got {d}", r.0.theta_hat.len())));
        }
        put(out, region_contains(&r.0, slice(theta, d, "theta")?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn ht_region_free(region: *mut HtRegion) {
    if !region.is_null() {
        drop(Box::from_raw(region));
    }
}
