//! C ABI over the planning pipeline.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns a
//! [`P2hhStatus`]; on failure [`p2hh_last_error`] describes the cause.
//! Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use p2hh_core::cli::{self, CliError, ExitKind, Mode, Overrides, RunConfig};
use p2hh_core::conic_solver::SolveStatus;
use p2hh_core::evaluate::AffinePolicySolution;
use p2hh_core::ies_model::Capacity;
use p2hh_core::reformulate::{safety_factor, ReformulationMode};

/// Result codes; the nonzero values up to 6 match the `p2hh` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P2hhStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Infeasible = 3,
    Limit = 4,
    Load = 5,
    Dimension = 6,
    /// A required pointer argument was null or a string was not UTF-8.
    InvalidArgument = 7,
}

/// Capacities reported by [`p2hh_plan_capacity`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P2hhCapacity {
    /// Electrolysis cell count.
    Cells = 0,
    /// Converter, MW.
    Converter = 1,
    /// Compressor, kg/h.
    Compressor = 2,
    /// Hydrogen tank, kg.
    Tank = 3,
    /// Electric boiler, MW.
    Boiler = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P2hhMode {
    Drcc = 0,
    Gaussian = 1,
}

/// Loaded and validated run configuration.
pub struct P2hhConfig {
    inner: RunConfig,
    path: PathBuf,
    overrides: Overrides,
}

/// Result of a planning run.
pub struct P2hhPlan {
    status: SolveStatus,
    objective: f64,
    gap: f64,
    nodes: usize,
    policy: Option<AffinePolicySolution>,
    solution_path: Option<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(kind: ExitKind) -> P2hhStatus {
    match kind {
        ExitKind::Internal => P2hhStatus::Internal,
        ExitKind::Config => P2hhStatus::Config,
        ExitKind::Infeasible => P2hhStatus::Infeasible,
        ExitKind::Limit => P2hhStatus::Limit,
        ExitKind::Load => P2hhStatus::Load,
        ExitKind::Dimension => P2hhStatus::Dimension,
    }
}

fn fail(e: CliError) -> P2hhStatus {
    set_error(&e.message);
    status_of(e.kind)
}

fn invalid(message: &str) -> P2hhStatus {
    set_error(message);
    P2hhStatus::InvalidArgument
}

/// Runs `f`, converting panics into `Internal`.
fn guard(f: impl FnOnce() -> P2hhStatus) -> P2hhStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            P2hhStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, P2hhStatus> {
    if p.is_null() {
        return Err(invalid(&format!("`{what}` is null")));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(invalid(&format!("`{what}` is not UTF-8"))),
    }
}

fn reload(config: &mut P2hhConfig) -> P2hhStatus {
    match RunConfig::load(&config.path, &config.overrides) {
        Ok(c) => {
            config.inner = c;
            P2hhStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn p2hh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn p2hh_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Safety factor of the chance-constraint reformulation.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn p2hh_safety_factor(mode: P2hhMode, epsilon: f64, out: *mut f64) -> P2hhStatus {
    guard(|| {
        if out.is_null() {
            return invalid("`out` is null");
        }
        let m = match mode {
            P2hhMode::Drcc => ReformulationMode::drcc(epsilon),
            P2hhMode::Gaussian => ReformulationMode::gaussian(epsilon),
        };
        match safety_factor(m) {
            Ok(f) => {
                *out = f;
                P2hhStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                P2hhStatus::Config
            }
        }
    })
}

/// Loads a TOML run configuration. Relative input paths resolve against
/// the file's directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point to writable
/// memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn p2hh_config_load(path: *const c_char, out: *mut *mut P2hhConfig) -> P2hhStatus {
    guard(|| {
        if out.is_null() {
            return invalid("`out` is null");
        }
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let overrides = Overrides::default();
        match RunConfig::load(&path, &overrides) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(P2hhConfig { inner, path, overrides }));
                P2hhStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a configuration; null is ignored.
///
/// # Safety
/// `config` must be null or a handle from [`p2hh_config_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2hh_config_free(config: *mut P2hhConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Redirects artifacts to `dir`.
///
/// # Safety
/// `config` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn p2hh_config_set_output(config: *mut P2hhConfig, dir: *const c_char) -> P2hhStatus {
    guard(|| {
        let Some(config) = config.as_mut() else {
            return invalid("`config` is null");
        };
        match path_arg(dir, "dir") {
            Ok(d) => {
                config.overrides.output = Some(d);
                reload(config)
            }
            Err(s) => s,
        }
    })
}

/// Sets the chance-constraint mode and violation probability. The
/// configuration is revalidated; on failure it is left unchanged.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn p2hh_config_set_mode(config: *mut P2hhConfig, mode: P2hhMode, epsilon: f64) -> P2hhStatus {
    guard(|| {
        let Some(config) = config.as_mut() else {
            return invalid("`config` is null");
        };
        let previous = config.overrides.clone();
        config.overrides.mode = Some(match mode {
            P2hhMode::Drcc => Mode::Drcc,
            P2hhMode::Gaussian => Mode::Gaussian,
        });
        config.overrides.epsilon = Some(epsilon);
        let status = reload(config);
        if status != P2hhStatus::Ok {
            config.overrides = previous;
        }
        status
    })
}

/// Enables or disables the two flexibility options.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn p2hh_config_set_flexibility(config: *mut P2hhConfig, p2hh: bool, boiler: bool) -> P2hhStatus {
    guard(|| {
        let Some(config) = config.as_mut() else {
            return invalid("`config` is null");
        };
        config.overrides.p2hh = Some(p2hh);
        config.overrides.boiler = Some(boiler);
        reload(config)
    })
}

/// Compiles and solves, writing the `plan` artifacts to the output
/// directory. A plan handle is returned whenever the solver ran, so
/// `Infeasible` and `Limit` results can still be inspected.
///
/// # Safety
/// `config` must be a live handle; `out` must point to writable memory
/// for one pointer.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan(config: *const P2hhConfig, out: *mut *mut P2hhPlan) -> P2hhStatus {
    guard(|| {
        let Some(config) = config.as_ref() else {
            return invalid("`config` is null");
        };
        if out.is_null() {
            return invalid("`out` is null");
        }
        let outcome = match cli::with_threads(|| cli::plan_command(&config.inner)) {
            Ok(o) => o,
            Err(e) => return fail(e),
        };
        let solution_path = outcome
            .files
            .iter()
            .find(|p| p.file_name().is_some_and(|n| n == "solution.csv"))
            .and_then(|p| CString::new(p.to_string_lossy().into_owned()).ok());
        let status = match outcome.check() {
            Ok(()) => P2hhStatus::Ok,
            Err(e) => fail(e),
        };
        *out = Box::into_raw(Box::new(P2hhPlan {
            status: outcome.solution.status,
            objective: outcome.solution.objective,
            gap: outcome.solution.gap,
            nodes: outcome.solution.nodes,
            policy: outcome.policy,
            solution_path,
        }));
        status
    })
}

/// Releases a plan; null is ignored.
///
/// # Safety
/// `plan` must be null or a handle from [`p2hh_plan`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan_free(plan: *mut P2hhPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Whether the plan was solved to optimality.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan_is_optimal(plan: *const P2hhPlan) -> bool {
    plan.as_ref().is_some_and(|p| p.status == SolveStatus::Optimal)
}

/// Annualized cost, relative gap and explored nodes of the plan. Any
/// output pointer may be null.
///
/// # Safety
/// `plan` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan_objective(
    plan: *const P2hhPlan,
    objective: *mut f64,
    gap: *mut f64,
    nodes: *mut usize,
) -> P2hhStatus {
    guard(|| {
        let Some(plan) = plan.as_ref() else {
            return invalid("`plan` is null");
        };
        if let Some(o) = objective.as_mut() {
            *o = plan.objective;
        }
        if let Some(g) = gap.as_mut() {
            *g = plan.gap;
        }
        if let Some(n) = nodes.as_mut() {
            *n = plan.nodes;
        }
        P2hhStatus::Ok
    })
}

/// Built capacity of an optimal plan.
///
/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan_capacity(plan: *const P2hhPlan, which: P2hhCapacity, out: *mut f64) -> P2hhStatus {
    guard(|| {
        let Some(plan) = plan.as_ref() else {
            return invalid("`plan` is null");
        };
        if out.is_null() {
            return invalid("`out` is null");
        }
        let Some(policy) = &plan.policy else {
            set_error("the plan has no solution");
            return P2hhStatus::Infeasible;
        };
        *out = match which {
            P2hhCapacity::Cells => policy.cells(),
            P2hhCapacity::Converter => policy.capacity(Capacity::Converter),
            P2hhCapacity::Compressor => policy.capacity(Capacity::Compressor),
            P2hhCapacity::Tank => policy.capacity(Capacity::Tank),
            P2hhCapacity::Boiler => policy.capacity(Capacity::Boiler),
        };
        P2hhStatus::Ok
    })
}

/// Path of the written solution CSV, or null when none was written. The
/// string lives as long as the plan.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn p2hh_plan_solution_path(plan: *const P2hhPlan) -> *const c_char {
    plan.as_ref()
        .and_then(|p| p.solution_path.as_ref())
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Replays the solution at `solution` on bootstrapped scenarios, writes
/// the `evaluate` artifacts and returns the violation fraction.
///
/// # Safety
/// `config` must be a live handle, `solution` a NUL-terminated string and
/// `fraction` writable.
#[no_mangle]
pub unsafe extern "C" fn p2hh_evaluate(
    config: *const P2hhConfig,
    solution: *const c_char,
    fraction: *mut f64,
) -> P2hhStatus {
    guard(|| {
        let Some(config) = config.as_ref() else {
            return invalid("`config` is null");
        };
        if fraction.is_null() {
            return invalid("`fraction` is null");
        }
        let path = match path_arg(solution, "solution") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match cli::with_threads(|| cli::evaluate_command(&config.inner, &path)) {
            Ok(o) => {
                *fraction = o.violation.fraction();
                P2hhStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
