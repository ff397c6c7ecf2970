//! C ABI over `hmm-fisher`.
//!
//! Models are opaque `HfModel` handles created by [`hf_model_new`] and
//! released with [`hf_model_free`]. Every other call returns an [`HfStatus`]
//! and writes results through caller-owned buffers; on failure
//! [`hf_last_error`] describes the error on the calling thread. Matrices are
//! row-major `p × p` arrays where `p` is [`hf_model_param_dim`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use hmm_fisher::fisher::{info_asymptotic, info_exact, singularity_of_matrix, AsymptoticRoute, InfoMatrix, Verdict};
use hmm_fisher::inference::stationary_loglik;
use hmm_fisher::sensitivity::score_hessian_stationary;
use hmm_fisher::{build_catalog_model, Error, ParamHmm};

/// Opaque model handle.
pub struct HfModel {
    inner: ParamHmm,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Parameters outside the model's region, or a uniform ergodicity failure.
    Assumption = 3,
    /// The operation needs a finite alphabet or exceeds a size limit.
    Capability = 4,
    SingularInformation = 5,
    Numerical = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HfStatus {
    match e {
        Error::UnknownModel(_)
        | Error::Dimension { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidObservation(_)
        | Error::NotSymmetric { .. } => HfStatus::InvalidArgument,
        Error::Inadmissible { .. }
        | Error::UniformErgodicity(_)
        | Error::NotStationary { .. }
        | Error::ZeroProbability { .. } => HfStatus::Assumption,
        Error::RequiresFiniteAlphabet(_) | Error::TooLarge { .. } => HfStatus::Capability,
        Error::SingularInformation(_) => HfStatus::SingularInformation,
        Error::Numerical(_) => HfStatus::Numerical,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HfStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            HfStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            HfStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const HfModel) -> Result<&'a ParamHmm, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or(Fail::Null("model"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn write_matrix(m: &nalgebra::DMatrix<f64>, out: &mut [f64]) {
    let p = m.nrows();
    for i in 0..p {
        for j in 0..p {
            out[i * p + j] = m[(i, j)];
        }
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds catalog model `name` ("M1", "M2", "M3-point", "M4") at `theta`, or
/// at its default point when `theta` is null.
///
/// # Safety
/// `name` must be a NUL-terminated string; `theta`, when not null, must point
/// to `theta_len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hf_model_new(
    name: *const c_char,
    theta: *const f64,
    theta_len: usize,
    out: *mut *mut HfModel,
) -> HfStatus {
    guard(|| {
        if name.is_null() {
            return Err(Fail::Null("name"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| Error::InvalidArgument("model name is not UTF-8".into()))?;
        let theta = if theta.is_null() {
            None
        } else {
            Some(slice::from_raw_parts(theta, theta_len))
        };
        let inner = build_catalog_model(name, theta)?;
        *out = Box::into_raw(Box::new(HfModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`hf_model_new`] and not have been freed. Null is
/// accepted.
#[no_mangle]
pub unsafe extern "C" fn hf_model_free(model: *mut HfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parameter dimension `p`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hf_model_param_dim(model: *const HfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.param_dim())
}

/// Stationary log-likelihood of `y[0..n]`.
///
/// # Safety
/// `model` must be a live handle, `y` must point to `n` doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn hf_stationary_loglik(model: *const HfModel, y: *const f64, n: usize, out: *mut f64) -> HfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = input(y, n, "y")?;
        let out = output(out, 1, "out")?;
        out[0] = stationary_loglik(m, y)?;
        Ok(())
    })
}

/// Stationary log-likelihood with its gradient (`p` doubles) and Hessian
/// (`p × p`). `score` and `hessian` may be null to skip them.
///
/// # Safety
/// As [`hf_stationary_loglik`]; non-null `score`/`hessian` must hold `p` and
/// `p * p` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_score_hessian(
    model: *const HfModel,
    y: *const f64,
    n: usize,
    loglik: *mut f64,
    score: *mut f64,
    hessian: *mut f64,
) -> HfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let y = input(y, n, "y")?;
        let p = m.param_dim();
        let sh = score_hessian_stationary(m, y)?;
        output(loglik, 1, "loglik")?[0] = sh.loglik;
        if !score.is_null() {
            output(score, p, "score")?.copy_from_slice(sh.score.as_slice());
        }
        if !hessian.is_null() {
            write_matrix(&sh.hessian, output(hessian, p * p, "hessian")?);
        }
        Ok(())
    })
}

/// `I_{Y_1^n}` by exact enumeration (finite alphabets only).
///
/// # Safety
/// `model` must be a live handle and `info` must hold `p * p` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_info_exact(model: *const HfModel, n: usize, info: *mut f64) -> HfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = output(info, m.param_dim() * m.param_dim(), "info")?;
        write_matrix(&info_exact(m, n)?.matrix, out);
        Ok(())
    })
}

/// Asymptotic information as the limit of the one-step conditional
/// information with `memory` past observations, averaged over `replicates`
/// windows. `stderr` (entrywise, `p × p`) may be null.
///
/// # Safety
/// `model` must be a live handle; `info` and non-null `stderr` must hold
/// `p * p` doubles.
#[no_mangle]
pub unsafe extern "C" fn hf_info_asymptotic(
    model: *const HfModel,
    memory: usize,
    replicates: usize,
    seed: u64,
    info: *mut f64,
    stderr: *mut f64,
) -> HfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = m.param_dim();
        let est: InfoMatrix = info_asymptotic(m, AsymptoticRoute::ConditionalLimit { memory, replicates }, seed)?;
        write_matrix(&est.matrix, output(info, p * p, "info")?);
        if !stderr.is_null() {
            let se = est.stderr.unwrap_or_else(|| nalgebra::DMatrix::zeros(p, p));
            write_matrix(&se, output(stderr, p * p, "stderr")?);
        }
        Ok(())
    })
}

/// Eigen-decomposition verdict on a symmetric `p × p` matrix: writes the
/// smallest eigenvalue, the numerical rank and 1 when the matrix is
/// nonsingular under threshold `max(tau_rel · λ_max, tau_abs)`, else 0.
///
/// # Safety
/// `matrix` must hold `p * p` doubles; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn hf_singularity(
    matrix: *const f64,
    p: usize,
    tau_rel: f64,
    tau_abs: f64,
    lambda_min: *mut f64,
    rank: *mut usize,
    nonsingular: *mut i32,
) -> HfStatus {
    guard(|| {
        if p == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()).into());
        }
        let a = input(matrix, p * p, "matrix")?;
        if lambda_min.is_null() || rank.is_null() || nonsingular.is_null() {
            return Err(Fail::Null("output"));
        }
        let r = singularity_of_matrix(&nalgebra::DMatrix::from_row_slice(p, p, a), tau_rel, tau_abs)?;
        *lambda_min = r.lambda_min;
        *rank = r.numerical_rank;
        *nonsingular = i32::from(r.verdict == Verdict::Nonsingular);
        Ok(())
    })
}
