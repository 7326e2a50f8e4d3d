//! C ABI over the `quintic` library.
//!
//! Conventions:
//!
//! - Every function returns a [`QuinticStatus`]; results go through out-pointers
//!   that are written only on success.
//! - Objects are opaque handles created by `*_new`-style calls and released by
//!   the matching `*_free`; freeing `NULL` is a no-op.
//! - After a non-`Ok` status, [`quintic_last_error`] returns a message owned by
//!   the library and valid until the next call on the same thread.
//! - Panics never cross the boundary; they surface as `QUINTIC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use quintic::board::{self, CollapseMap};
use quintic::bounds;
use quintic::grid::GridSpec;
use quintic::harness::{self, Experiment, ExperimentConfig};
use quintic::kernels::{self, SeparableKernel};
use quintic::nls::{self, NlsParams, WaveFunction};
use quintic::{Error, C64};

/// Status code of every call. Values 2 to 4 agree with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuinticStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    ResourceCap = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Periodic grid.
pub struct QuinticGrid(GridSpec);

/// One-particle field on a grid.
pub struct QuinticWave(WaveFunction);

/// Separable kernel.
pub struct QuinticKernel(SeparableKernel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> QuinticStatus {
    match e {
        Error::InvalidInput(_) | Error::Validation(_) => QuinticStatus::InvalidInput,
        Error::ResourceCap { .. } => QuinticStatus::ResourceCap,
        Error::Numerical(_) => QuinticStatus::Numerical,
        Error::Io(_) | Error::Serialization(_) => QuinticStatus::Io,
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

type FfiResult<T> = std::result::Result<T, Failure>;

/// Runs `f`, converting errors and panics into status codes.
fn guard<F: FnOnce() -> FfiResult<()>>(f: F) -> QuinticStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QuinticStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed for {what}"));
            QuinticStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            QuinticStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::invalid(format!("{what} is not valid UTF-8"))))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread; empty when none failed.
#[no_mangle]
pub extern "C" fn quintic_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn quintic_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out_grid` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn quintic_grid_new(
    dim: usize,
    points: usize,
    length: f64,
    out_grid: *mut *mut QuinticGrid,
) -> QuinticStatus {
    guard(|| {
        let slot = out(out_grid, "out_grid")?;
        *slot = boxed(QuinticGrid(GridSpec::new(dim, points, length)?));
        Ok(())
    })
}

/// Number of nodes `M^d`.
///
/// # Safety
/// `grid` must come from [`quintic_grid_new`]; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_grid_len(grid: *const QuinticGrid, out_len: *mut usize) -> QuinticStatus {
    guard(|| {
        *out(out_len, "out_len")? = deref(grid, "grid")?.0.len();
        Ok(())
    })
}

/// # Safety
/// `grid` must come from [`quintic_grid_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn quintic_grid_free(grid: *mut QuinticGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Normalized Gaussian packet centred at the origin with momentum along the first axis.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_gaussian(
    grid: *const QuinticGrid,
    width: f64,
    momentum: f64,
    out_wave: *mut *mut QuinticWave,
) -> QuinticStatus {
    guard(|| {
        let g = deref(grid, "grid")?.0;
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::invalid(format!("width must be positive, got {width}")).into());
        }
        *out(out_wave, "out_wave")? = boxed(QuinticWave(WaveFunction::gaussian(g, width, [0.0; 2], [momentum, 0.0])));
        Ok(())
    })
}

/// Field from `len = M^d` real and imaginary parts in row-major node order.
///
/// # Safety
/// `re` and `im` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_from_values(
    grid: *const QuinticGrid,
    re: *const f64,
    im: *const f64,
    len: usize,
    out_wave: *mut *mut QuinticWave,
) -> QuinticStatus {
    guard(|| {
        let g = deref(grid, "grid")?.0;
        let re = slice(re, len, "re")?;
        let im = slice(im, len, "im")?;
        let values = re.iter().zip(im).map(|(a, b)| C64::new(*a, *b)).collect();
        *out(out_wave, "out_wave")? = boxed(QuinticWave(WaveFunction::new(g, values)?));
        Ok(())
    })
}

/// Copies the `len = M^d` node values out.
///
/// # Safety
/// `re` and `im` must point to writable buffers of `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_values(
    wave: *const QuinticWave,
    re: *mut f64,
    im: *mut f64,
    len: usize,
) -> QuinticStatus {
    guard(|| {
        let w = &deref(wave, "wave")?.0;
        if len != w.values.len() {
            return Err(Error::invalid(format!("buffer holds {len} values, field has {}", w.values.len())).into());
        }
        let re = slice_mut(re, len, "re")?;
        let im = slice_mut(im, len, "im")?;
        for (i, v) in w.values.iter().enumerate() {
            re[i] = v.re;
            im[i] = v.im;
        }
        Ok(())
    })
}

/// `h^d sum |phi|^2`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_mass(wave: *const QuinticWave, out_mass: *mut f64) -> QuinticStatus {
    guard(|| {
        *out(out_mass, "out_mass")? = nls::mass(&deref(wave, "wave")?.0);
        Ok(())
    })
}

/// Time attached to the field.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_time(wave: *const QuinticWave, out_t: *mut f64) -> QuinticStatus {
    guard(|| {
        *out(out_t, "out_t")? = deref(wave, "wave")?.0.t;
        Ok(())
    })
}

/// # Safety
/// `wave` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn quintic_wave_free(wave: *mut QuinticWave) {
    if !wave.is_null() {
        drop(Box::from_raw(wave));
    }
}

/// Strang evolution to `total` with couplings `b0 + lambda3` (quintic) and `lambda2` (cubic).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_nls_evolve(
    wave: *const QuinticWave,
    b0: f64,
    lambda2: f64,
    lambda3: f64,
    dt: f64,
    total: f64,
    out_wave: *mut *mut QuinticWave,
) -> QuinticStatus {
    guard(|| {
        let w = &deref(wave, "wave")?.0;
        let params = NlsParams {
            b0,
            lambda2,
            lambda3,
            dt,
        }
        .validated()?;
        let steps = (total / dt).round().max(1.0) as usize;
        let traj = nls::evolve(w, &params, total, steps)?;
        *out(out_wave, "out_wave")? = boxed(QuinticWave(traj.last().clone()));
        Ok(())
    })
}

/// `|phi><phi|^{(x)k}`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_factorized(
    wave: *const QuinticWave,
    k: usize,
    out_kernel: *mut *mut QuinticKernel,
) -> QuinticStatus {
    guard(|| {
        let g = kernels::factorized(&deref(wave, "wave")?.0, k)?;
        *out(out_kernel, "out_kernel")? = boxed(QuinticKernel(g));
        Ok(())
    })
}

/// Sobolev-weighted Hilbert-Schmidt norm.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_norm(
    kernel: *const QuinticKernel,
    alpha: f64,
    out_norm: *mut f64,
) -> QuinticStatus {
    guard(|| {
        *out(out_norm, "out_norm")? = kernels::kernel_norm(&deref(kernel, "kernel")?.0, alpha)?;
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_order(kernel: *const QuinticKernel, out_order: *mut usize) -> QuinticStatus {
    guard(|| {
        *out(out_order, "out_order")? = deref(kernel, "kernel")?.0.order();
        Ok(())
    })
}

/// `B_{j;k+1,k+2} gamma`, with `j` 1-based.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_contract(
    kernel: *const QuinticKernel,
    j: usize,
    out_kernel: *mut *mut QuinticKernel,
) -> QuinticStatus {
    guard(|| {
        let g = kernels::contract(&deref(kernel, "kernel")?.0, j)?;
        *out(out_kernel, "out_kernel")? = boxed(QuinticKernel(g));
        Ok(())
    })
}

/// `U(t) gamma U(t)^*`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_free_propagate(
    kernel: *const QuinticKernel,
    t: f64,
    out_kernel: *mut *mut QuinticKernel,
) -> QuinticStatus {
    guard(|| {
        let g = kernels::free_propagate(&deref(kernel, "kernel")?.0, t);
        *out(out_kernel, "out_kernel")? = boxed(QuinticKernel(g));
        Ok(())
    })
}

/// # Safety
/// `kernel` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn quintic_kernel_free(kernel: *mut QuinticKernel) {
    if !kernel.is_null() {
        drop(Box::from_raw(kernel));
    }
}

/// `prod_{j=1}^n (r + 2j - 2)`.
///
/// # Safety
/// `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_board_map_count(r: usize, n: usize, out_count: *mut u64) -> QuinticStatus {
    guard(|| {
        *out(out_count, "out_count")? = board::map_count(r, n);
        Ok(())
    })
}

/// Exhaustive number of upper-echelon maps, refusing more than `cap` maps.
///
/// # Safety
/// `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_board_count_echelon(
    r: usize,
    n: usize,
    cap: u64,
    out_count: *mut u64,
) -> QuinticStatus {
    guard(|| {
        *out(out_count, "out_count")? = board::count_echelon(r, n, cap)?;
        Ok(())
    })
}

/// Canonical form of the map `picks[0..n]` under the deterministic move order.
/// Writes the canonical picks and the sigma (both length `n`) and the move count.
///
/// # Safety
/// `picks`, `out_picks` and `out_sigma` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn quintic_board_to_echelon(
    r: usize,
    picks: *const usize,
    n: usize,
    budget: usize,
    out_picks: *mut usize,
    out_sigma: *mut usize,
    out_moves: *mut usize,
) -> QuinticStatus {
    guard(|| {
        let map = CollapseMap::new(r, slice(picks, n, "picks")?.to_vec())?;
        let c = board::to_echelon(&map, budget)?;
        let op = slice_mut(out_picks, n, "out_picks")?;
        let os = slice_mut(out_sigma, n, "out_sigma")?;
        let om = out(out_moves, "out_moves")?;
        op.copy_from_slice(&c.state.map.picks);
        os.copy_from_slice(&c.state.sigma());
        *om = c.moves;
        Ok(())
    })
}

/// `int dy <P - y>^{-(2 - 2 alpha)} <y>^{-2}` over `R^d`, `P` of length `d`.
/// A divergent integral reports `converged = 0` and an infinite value.
///
/// # Safety
/// `p` must hold `d` doubles; out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn quintic_crucialint(
    alpha: f64,
    d: usize,
    p: *const f64,
    out_value: *mut f64,
    out_error: *mut f64,
    out_converged: *mut i32,
) -> QuinticStatus {
    guard(|| {
        let q = bounds::crucialint(alpha, d, slice(p, d, "p")?)?;
        let (v, e, c) = (
            out(out_value, "out_value")?,
            out(out_error, "out_error")?,
            out(out_converged, "out_converged")?,
        );
        *v = q.value;
        *e = q.error;
        *c = q.converged as i32;
        Ok(())
    })
}

/// Runs a named experiment as the CLI would. `config_toml` may be `NULL` for
/// defaults; `has_seed = 0` keeps the configured or default seed.
///
/// # Safety
/// String arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn quintic_run_experiment(
    name: *const c_char,
    config_toml: *const c_char,
    out_dir: *const c_char,
    seed: u64,
    has_seed: i32,
    threads: usize,
) -> QuinticStatus {
    guard(|| {
        let exp = Experiment::from_name(text(name, "name")?)?;
        let cfg = if config_toml.is_null() {
            ExperimentConfig::default()
        } else {
            ExperimentConfig::from_toml(text(config_toml, "config_toml")?)?
        };
        let dir = text(out_dir, "out_dir")?;
        let seed = (has_seed != 0).then_some(seed);
        harness::run(exp, &cfg, seed, Path::new(dir), threads)?;
        Ok(())
    })
}
