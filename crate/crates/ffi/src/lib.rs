//! C ABI over the accountant, the sanitization mechanism and MLP checkpoints.
//!
//! Every function returns a [`DpdfdStatus`]; results are written through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`dpdfd_last_error`]. Objects are opaque handles released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dpdfd::accountant::{self, AccountingMode, AccountingParams, LambdaGrid};
use dpdfd::dpmech::{self, BoundMode, MechanismConfig, NoiseSource};
use dpdfd::nnkit::{checkpoint, MlpModel};
use dpdfd::tensor::Tensor;
use dpdfd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpdfdStatus {
    Ok = 0,
    NullPointer = 1,
    Dimension = 2,
    Validation = 3,
    Degenerate = 4,
    Domain = 5,
    Infeasible = 6,
    Numerical = 7,
    Io = 8,
    Format = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpdfdAccounting {
    Absolute = 0,
    Consistent = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpdfdBoundMode {
    Normalize = 0,
    Clip = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DpdfdAccountingParams {
    pub norm_bound: f64,
    pub classes: u64,
    pub batch: u64,
    pub iterations: u64,
    pub noise_scale: f64,
    pub delta: f64,
    pub mode: DpdfdAccounting,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DpdfdMechanismConfig {
    pub norm_bound: f64,
    pub noise_scale: f64,
    pub stability: f64,
    pub mode: DpdfdBoundMode,
}

/// Opaque model handle.
pub struct DpdfdModel(MlpModel);

/// Opaque Gaussian noise stream.
pub struct DpdfdNoiseSource(NoiseSource);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DpdfdStatus {
    match e {
        Error::Dimension(_) => DpdfdStatus::Dimension,
        Error::Validation(_) => DpdfdStatus::Validation,
        Error::Degenerate(_) => DpdfdStatus::Degenerate,
        Error::Domain(_) => DpdfdStatus::Domain,
        Error::Infeasible(_) => DpdfdStatus::Infeasible,
        Error::Numerical(_) => DpdfdStatus::Numerical,
        Error::Io { .. } => DpdfdStatus::Io,
        Error::Format(_) => DpdfdStatus::Format,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpdfdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpdfdStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DpdfdStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".to_string());
            DpdfdStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn input<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

impl From<&DpdfdAccountingParams> for AccountingParams {
    fn from(p: &DpdfdAccountingParams) -> Self {
        AccountingParams {
            norm_bound: p.norm_bound,
            classes: p.classes,
            batch: p.batch,
            iterations: p.iterations,
            noise_scale: p.noise_scale,
            delta: p.delta,
            mode: match p.mode {
                DpdfdAccounting::Absolute => AccountingMode::Absolute,
                DpdfdAccounting::Consistent => AccountingMode::Consistent,
            },
        }
    }
}

impl From<&DpdfdMechanismConfig> for MechanismConfig {
    fn from(c: &DpdfdMechanismConfig) -> Self {
        MechanismConfig {
            norm_bound: c.norm_bound,
            noise_scale: c.noise_scale,
            stability: c.stability,
            mode: match c.mode {
                DpdfdBoundMode::Normalize => BoundMode::Normalize,
                DpdfdBoundMode::Clip => BoundMode::Clip,
            },
        }
    }
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_sensitivity(norm_bound: f64, classes: u64, result: *mut f64) -> DpdfdStatus {
    guard(|| {
        *out(result, "result")? = accountant::sensitivity(norm_bound, classes)?;
        Ok(())
    })
}

/// # Safety
/// `params` and `result` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_rdp_per_query(
    params: *const DpdfdAccountingParams,
    lambda: f64,
    result: *mut f64,
) -> DpdfdStatus {
    guard(|| {
        let p = AccountingParams::from(input(params, "params")?);
        *out(result, "result")? = accountant::rdp_per_query(&p, lambda)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_rdp_to_dp(eps_rdp: f64, lambda: f64, delta: f64, result: *mut f64) -> DpdfdStatus {
    guard(|| {
        *out(result, "result")? = accountant::rdp_to_dp(eps_rdp, lambda, delta)?;
        Ok(())
    })
}

/// ε minimized over the standard order grid. `lambda_star` receives NaN when
/// nothing was spent; it may be null.
///
/// # Safety
/// `params` and `epsilon` must be valid pointers; `lambda_star` may be null.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_optimal_epsilon(
    params: *const DpdfdAccountingParams,
    epsilon: *mut f64,
    lambda_star: *mut f64,
) -> DpdfdStatus {
    guard(|| {
        let p = AccountingParams::from(input(params, "params")?);
        let eps = out(epsilon, "epsilon")?;
        let e = accountant::optimal_epsilon(&p, &LambdaGrid::standard())?;
        *eps = e.epsilon;
        if let Some(l) = lambda_star.as_mut() {
            *l = e.lambda_star.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Smallest σ meeting `target` ε; `params.noise_scale` is ignored.
///
/// # Safety
/// `params` and `sigma` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_calibrate_sigma(
    target: f64,
    params: *const DpdfdAccountingParams,
    sigma: *mut f64,
) -> DpdfdStatus {
    guard(|| {
        let p = AccountingParams::from(input(params, "params")?);
        let s = out(sigma, "sigma")?;
        *s = accountant::calibrate_sigma(target, &p, &LambdaGrid::standard())?;
        Ok(())
    })
}

/// Largest iteration count within `budget`; `params.iterations` is ignored.
///
/// # Safety
/// `params` and `iterations` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_max_iterations(
    budget: f64,
    params: *const DpdfdAccountingParams,
    iterations: *mut u64,
) -> DpdfdStatus {
    guard(|| {
        let p = AccountingParams::from(input(params, "params")?);
        let t = out(iterations, "iterations")?;
        *t = accountant::max_iterations(budget, &p, &LambdaGrid::standard())?;
        Ok(())
    })
}

/// Creates a noise stream; free it with [`dpdfd_noise_source_free`].
#[no_mangle]
pub extern "C" fn dpdfd_noise_source_new(seed: u64) -> *mut DpdfdNoiseSource {
    Box::into_raw(Box::new(DpdfdNoiseSource(NoiseSource::new(seed))))
}

/// # Safety
/// `source` must be null or a handle from [`dpdfd_noise_source_new`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_noise_source_free(source: *mut DpdfdNoiseSource) {
    if !source.is_null() {
        drop(Box::from_raw(source));
    }
}

/// Sanitizes `batch` row-major gradients of length `dim` into `result`
/// (length `dim`).
///
/// # Safety
/// `grads` must hold `batch·dim` values, `result` `dim` values; `cfg` and
/// `source` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_sanitize_batch(
    grads: *const f64,
    batch: usize,
    dim: usize,
    cfg: *const DpdfdMechanismConfig,
    source: *mut DpdfdNoiseSource,
    result: *mut f64,
) -> DpdfdStatus {
    guard(|| {
        let cfg = MechanismConfig::from(input(cfg, "cfg")?);
        let source = out(source, "source")?;
        let total = batch
            .checked_mul(dim)
            .ok_or_else(|| Error::Validation("batch·dim overflows".into()))?;
        let data = slice(grads, total, "grads")?;
        let dst = slice_mut(result, dim, "result")?;
        let rows: Vec<&[f64]> = if dim == 0 { Vec::new() } else { data.chunks(dim).collect() };
        let g = dpmech::sanitize_batch(&rows, &cfg, &mut source.0)?;
        dst.copy_from_slice(&g);
        Ok(())
    })
}

/// Loads a JSON checkpoint; free the handle with [`dpdfd_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_model_load(path: *const c_char, model: *mut *mut DpdfdModel) -> DpdfdStatus {
    guard(|| {
        let path = CStr::from_ptr(input(path, "path")?)
            .to_str()
            .map_err(|_| Error::Validation("path is not UTF-8".into()))?;
        let slot = out(model, "model")?;
        *slot = ptr::null_mut();
        let m = checkpoint::load(path)?;
        *slot = Box::into_raw(Box::new(DpdfdModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle from [`dpdfd_model_load`].
#[no_mangle]
pub unsafe extern "C" fn dpdfd_model_free(model: *mut DpdfdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model`, `input_dim` and `output_dim` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_model_dims(
    model: *const DpdfdModel,
    input_dim: *mut usize,
    output_dim: *mut usize,
) -> DpdfdStatus {
    guard(|| {
        let m = &input(model, "model")?.0;
        *out(input_dim, "input_dim")? = m.input_dim();
        *out(output_dim, "output_dim")? = m.output_dim();
        Ok(())
    })
}

/// Forward pass on `rows` row-major inputs; writes `rows·output_dim` logits.
///
/// # Safety
/// `inputs` must hold `rows·input_dim` values and `logits`
/// `rows·output_dim` values.
#[no_mangle]
pub unsafe extern "C" fn dpdfd_model_forward(
    model: *const DpdfdModel,
    inputs: *const f64,
    rows: usize,
    logits: *mut f64,
) -> DpdfdStatus {
    guard(|| {
        let m = &input(model, "model")?.0;
        let total = rows
            .checked_mul(m.input_dim())
            .ok_or_else(|| Error::Validation("rows·input_dim overflows".into()))?;
        let x = Tensor::new(vec![rows, m.input_dim()], slice(inputs, total, "inputs")?.to_vec())?;
        let trace = m.forward(&x)?;
        let dst = slice_mut(logits, rows * m.output_dim(), "logits")?;
        dst.copy_from_slice(trace.logits().data());
        Ok(())
    })
}
