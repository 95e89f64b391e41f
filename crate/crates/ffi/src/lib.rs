//! C interface to the bsvielab solvers.
//!
//! Conventions:
//! - every fallible call returns a [`BsvieStatus`]; `BSVIE_STATUS_OK` is 0;
//! - on failure a thread-local message is set, readable through
//!   [`bsvie_last_error`] until the next failing call on the same thread;
//! - worlds and solutions are opaque handles created and released by this
//!   library; passing a handle after `free` is undefined behavior;
//! - all pointers must be valid for the stated lengths; null pointers are
//!   rejected with `BSVIE_STATUS_NULL_POINTER`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::slice;

use bsvielab::bsvie::{picard_type1, solve_type1_noy};
use bsvielab::cli::presets;
use bsvielab::conditional::CondExpEngine;
use bsvielab::constants::{self, Condition, JumpBound};
use bsvielab::lattice::{
    build_tree, simulate_paths, BrownianScheme, Clock, ClockSpec, JumpMeasureSpec, TreeOptions,
    World,
};
use bsvielab::Error;

/// Status of a library call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsvieStatus {
    Ok = 0,
    Domain = 1,
    Convergence = 2,
    NeverAdmissible = 3,
    Invalid = 4,
    Config = 5,
    Io = 6,
    Serde = 7,
    NullPointer = 8,
    Utf8 = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: BsvieStatus, message: &str) -> BsvieStatus {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
    status
}

fn fail_error(e: Error) -> BsvieStatus {
    let status = match e {
        Error::Domain(_) => BsvieStatus::Domain,
        Error::Convergence(_) => BsvieStatus::Convergence,
        Error::NeverAdmissible(_) => BsvieStatus::NeverAdmissible,
        Error::Invalid(_) => BsvieStatus::Invalid,
        Error::Config(_) => BsvieStatus::Config,
        Error::Io(_) => BsvieStatus::Io,
        Error::Serde(_) => BsvieStatus::Serde,
    };
    fail(status, &e.to_string())
}

/// Message of the last failing call on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bsvie_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, BsvieStatus> {
    if ptr.is_null() {
        return Err(fail(BsvieStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(BsvieStatus::Utf8, "string argument is not valid UTF-8"))
}

/// Well-posedness constants at one weight exponent. Fields that are
/// undefined when `M >= 1/2` carry NaN and a cleared flag.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BsvieConstants {
    pub beta: f64,
    pub frak_f: f64,
    pub delta_star: f64,
    pub kappa: f64,
    pub big_m: f64,
    pub sigma: f64,
    pub sigma_tilde: f64,
    pub type2_value: f64,
    pub sigma_defined: bool,
    pub type1_ok: bool,
    pub type1_noy_ok: bool,
    pub type2_ok: bool,
}

/// Evaluates the admissibility constants at `beta` for a clock jump bound.
///
/// # Safety
/// `out` must point to writable memory for one `BsvieConstants`.
#[no_mangle]
pub unsafe extern "C" fn bsvie_constants(
    beta: f64,
    frak_f: f64,
    out: *mut BsvieConstants,
) -> BsvieStatus {
    if out.is_null() {
        return fail(BsvieStatus::NullPointer, "null output pointer");
    }
    let bound = match JumpBound::new(frak_f) {
        Ok(b) => b,
        Err(e) => return fail_error(e),
    };
    match constants::evaluate(beta, bound) {
        Ok(c) => {
            *out = BsvieConstants {
                beta: c.beta,
                frak_f: c.frak_f,
                delta_star: c.delta_star,
                kappa: c.kappa,
                big_m: c.big_m,
                sigma: c.sigma.unwrap_or(f64::NAN),
                sigma_tilde: c.sigma_tilde.unwrap_or(f64::NAN),
                type2_value: c.type2_value.unwrap_or(f64::NAN),
                sigma_defined: c.sigma.is_some(),
                type1_ok: c.type1_ok,
                type1_noy_ok: c.type1_noy_ok,
                type2_ok: c.type2_ok,
            };
            BsvieStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Smallest admissible weight exponent for a condition
/// (`"type1"`, `"type1_noY"` or `"type2"`).
///
/// # Safety
/// `condition` must be a valid C string and `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn bsvie_min_beta(
    condition: *const c_char,
    frak_f: f64,
    out: *mut f64,
) -> BsvieStatus {
    if out.is_null() {
        return fail(BsvieStatus::NullPointer, "null output pointer");
    }
    let name = match cstr(condition) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let cond = match Condition::parse(name) {
        Ok(c) => c,
        Err(e) => return fail_error(e),
    };
    let bound = match JumpBound::new(frak_f) {
        Ok(b) => b,
        Err(e) => return fail_error(e),
    };
    match constants::min_beta(cond, bound) {
        Ok(beta) => {
            *out = beta;
            BsvieStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Opaque discrete noise model (scenario tree or path ensemble).
pub struct BsvieWorld {
    inner: World,
}

unsafe fn jump_spec(
    marks: *const f64,
    intensities: *const f64,
    n_marks: usize,
) -> Result<JumpMeasureSpec, BsvieStatus> {
    let (marks, intensities) = if n_marks == 0 {
        (Vec::new(), Vec::new())
    } else {
        if marks.is_null() || intensities.is_null() {
            return Err(fail(BsvieStatus::NullPointer, "null mark arrays"));
        }
        (
            slice::from_raw_parts(marks, n_marks).to_vec(),
            slice::from_raw_parts(intensities, n_marks).to_vec(),
        )
    };
    JumpMeasureSpec::new(marks, intensities).map_err(fail_error)
}

/// Builds an exact scenario tree on a uniform grid.
/// `brownian` is one of `"none"`, `"two-point"`, `"three-point"`.
///
/// # Safety
/// `marks` and `intensities` must hold `n_marks` doubles each; `out`
/// receives an owned handle to release with [`bsvie_world_free`].
#[no_mangle]
pub unsafe extern "C" fn bsvie_world_new_tree(
    horizon: f64,
    steps: usize,
    brownian: *const c_char,
    extra_noise: bool,
    marks: *const f64,
    intensities: *const f64,
    n_marks: usize,
    out: *mut *mut BsvieWorld,
) -> BsvieStatus {
    if out.is_null() {
        return fail(BsvieStatus::NullPointer, "null output pointer");
    }
    let scheme = match cstr(brownian) {
        Ok("none") => BrownianScheme::None,
        Ok("two-point") => BrownianScheme::TwoPoint,
        Ok("three-point") => BrownianScheme::ThreePoint,
        Ok(other) => {
            return fail(
                BsvieStatus::Invalid,
                &format!("unknown Brownian scheme `{other}`"),
            )
        }
        Err(status) => return status,
    };
    let jumps = match jump_spec(marks, intensities, n_marks) {
        Ok(j) => j,
        Err(status) => return status,
    };
    let clock = match Clock::build(&ClockSpec::ito_uniform(horizon, steps)) {
        Ok(c) => c,
        Err(e) => return fail_error(e),
    };
    let options = TreeOptions {
        brownian: scheme,
        extra_noise,
        max_steps: steps,
    };
    match build_tree(&clock, &jumps, options) {
        Ok(tree) => {
            *out = Box::into_raw(Box::new(BsvieWorld {
                inner: World::Tree(tree),
            }));
            BsvieStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Draws a Monte-Carlo path ensemble on a uniform grid.
///
/// # Safety
/// Same pointer contract as [`bsvie_world_new_tree`].
#[no_mangle]
pub unsafe extern "C" fn bsvie_world_new_ensemble(
    horizon: f64,
    steps: usize,
    extra_noise: bool,
    marks: *const f64,
    intensities: *const f64,
    n_marks: usize,
    n_paths: usize,
    seed: u64,
    out: *mut *mut BsvieWorld,
) -> BsvieStatus {
    if out.is_null() {
        return fail(BsvieStatus::NullPointer, "null output pointer");
    }
    let jumps = match jump_spec(marks, intensities, n_marks) {
        Ok(j) => j,
        Err(status) => return status,
    };
    let clock = match Clock::build(&ClockSpec::ito_uniform(horizon, steps)) {
        Ok(c) => c,
        Err(e) => return fail_error(e),
    };
    match simulate_paths(&clock, &jumps, extra_noise, n_paths, seed) {
        Ok(ens) => {
            *out = Box::into_raw(Box::new(BsvieWorld {
                inner: World::Ensemble(ens),
            }));
            BsvieStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Number of grid steps of a world.
///
/// # Safety
/// `world` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bsvie_world_n_steps(world: *const BsvieWorld) -> usize {
    if world.is_null() {
        return 0;
    }
    (*world).inner.n_steps()
}

/// Releases a world handle. Null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bsvie_world_free(world: *mut BsvieWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Opaque solved Type-I equation: diagonal means per grid time and, on
/// trees, the defining-equation residual.
pub struct BsvieSolution {
    diag_mean: Vec<f64>,
    y0: f64,
    residual: f64,
}

/// Solves the Type-I equation of a named data preset on a world.
/// Presets are the same catalog as in the command-line tool.
///
/// # Safety
/// `world` must be live, `preset` a valid C string; `out` receives an
/// owned handle to release with [`bsvie_solution_free`].
#[no_mangle]
pub unsafe extern "C" fn bsvie_solve_type1(
    world: *const BsvieWorld,
    preset: *const c_char,
    tol: f64,
    max_iter: usize,
    out: *mut *mut BsvieSolution,
) -> BsvieStatus {
    if world.is_null() || out.is_null() {
        return fail(BsvieStatus::NullPointer, "null world or output pointer");
    }
    let name = match cstr(preset) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let w = &(*world).inner;
    let result = (|| {
        let (phi, f) = presets::build(name, w)?.type1()?;
        let engine = CondExpEngine::default();
        let sol = if f.omega == 0.0 {
            solve_type1_noy(&phi, &f, w, &engine)?
        } else {
            picard_type1(&phi, &f, w, &engine, tol, max_iter)?.0
        };
        let residual = if w.is_tree() {
            bsvielab::bsvie::type1_residual(&sol, &phi, &f, w)?
        } else {
            f64::NAN
        };
        let diag_mean = sol
            .y
            .iter()
            .enumerate()
            .map(|(l, v)| w.expectation(l, v))
            .collect();
        Ok::<_, Error>(BsvieSolution {
            diag_mean,
            y0: sol.y[0][0],
            residual,
        })
    })();
    match result {
        Ok(sol) => {
            *out = Box::into_raw(Box::new(sol));
            BsvieStatus::Ok
        }
        Err(e) => fail_error(e),
    }
}

/// Value of the diagonal at time zero.
///
/// # Safety
/// `sol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bsvie_solution_y0(sol: *const BsvieSolution, out: *mut f64) -> BsvieStatus {
    if sol.is_null() || out.is_null() {
        return fail(BsvieStatus::NullPointer, "null solution or output pointer");
    }
    *out = (*sol).y0;
    BsvieStatus::Ok
}

/// Number of grid times covered by the diagonal (steps + 1).
///
/// # Safety
/// `sol` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bsvie_solution_len(sol: *const BsvieSolution) -> usize {
    if sol.is_null() {
        return 0;
    }
    (*sol).diag_mean.len()
}

/// Mean of the diagonal at one grid time.
///
/// # Safety
/// `sol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bsvie_solution_diag_mean(
    sol: *const BsvieSolution,
    level: usize,
    out: *mut f64,
) -> BsvieStatus {
    if sol.is_null() || out.is_null() {
        return fail(BsvieStatus::NullPointer, "null solution or output pointer");
    }
    let sol = &*sol;
    match sol.diag_mean.get(level) {
        Some(v) => {
            *out = *v;
            BsvieStatus::Ok
        }
        None => fail(BsvieStatus::Invalid, "level out of range"),
    }
}

/// Defining-equation residual on trees; NaN on ensembles.
///
/// # Safety
/// `sol` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bsvie_solution_residual(
    sol: *const BsvieSolution,
    out: *mut f64,
) -> BsvieStatus {
    if sol.is_null() || out.is_null() {
        return fail(BsvieStatus::NullPointer, "null solution or output pointer");
    }
    *out = (*sol).residual;
    BsvieStatus::Ok
}

/// Releases a solution handle. Null is ignored.
///
/// # Safety
/// The handle must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bsvie_solution_free(sol: *mut BsvieSolution) {
    if !sol.is_null() {
        drop(Box::from_raw(sol));
    }
}
