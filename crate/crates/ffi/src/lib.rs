//! C ABI over the scenario runner.
//!
//! Handles are opaque pointers created by the `sdmpc_config_*` constructors
//! and `sdmpc_run`, and released with the matching `_free`. Every fallible
//! call returns an [`SdmpcStatus`]; the message of the most recent failure on
//! the calling thread is available from [`sdmpc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sdmpc_core::error::{Error, ErrorCategory};
use sdmpc_core::scenario::{emit_report, run_scenario, Mode, ScenarioConfig, ScenarioRun};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdmpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    SolverFailure = 4,
    IoFailure = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdmpcMode {
    Nominal = 0,
    Selfish = 1,
    Corrected = 2,
}

impl From<SdmpcMode> for Mode {
    fn from(m: SdmpcMode) -> Self {
        match m {
            SdmpcMode::Nominal => Mode::Nominal,
            SdmpcMode::Selfish => Mode::Selfish,
            SdmpcMode::Corrected => Mode::Corrected,
        }
    }
}

/// Scenario configuration.
pub struct SdmpcConfig {
    inner: ScenarioConfig,
}

/// Completed scenario run: trace and objective report.
pub struct SdmpcRun {
    inner: ScenarioRun,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SdmpcStatus, message: impl Into<String>) -> SdmpcStatus {
    set_last_error(message.into());
    status
}

fn from_error(e: Error) -> SdmpcStatus {
    let status = match e.category() {
        ErrorCategory::Validation => SdmpcStatus::InvalidConfig,
        ErrorCategory::Solver => SdmpcStatus::SolverFailure,
        ErrorCategory::Io => SdmpcStatus::IoFailure,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> SdmpcStatus) -> SdmpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(SdmpcStatus::Panic, "internal panic"),
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, SdmpcStatus> {
    if s.is_null() {
        return Err(fail(SdmpcStatus::NullPointer, "string argument is NULL"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(SdmpcStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> SdmpcStatus {
    if out.is_null() {
        return fail(SdmpcStatus::NullPointer, "output pointer is NULL");
    }
    out.write(value);
    SdmpcStatus::Ok
}

unsafe fn config_ref<'a>(cfg: *const SdmpcConfig) -> Result<&'a ScenarioConfig, SdmpcStatus> {
    cfg.as_ref()
        .map(|c| &c.inner)
        .ok_or_else(|| fail(SdmpcStatus::NullPointer, "config handle is NULL"))
}

unsafe fn run_ref<'a>(run: *const SdmpcRun) -> Result<&'a ScenarioRun, SdmpcStatus> {
    run.as_ref()
        .map(|r| &r.inner)
        .ok_or_else(|| fail(SdmpcStatus::NullPointer, "run handle is NULL"))
}

fn agent_step(
    run: &ScenarioRun,
    step: usize,
    agent: usize,
) -> Result<&sdmpc_core::coordinator::AgentStep, SdmpcStatus> {
    run.trace
        .steps
        .get(step)
        .and_then(|s| s.agents.get(agent))
        .ok_or_else(|| {
            fail(
                SdmpcStatus::OutOfRange,
                format!("no record for step {step}, agent {agent}"),
            )
        })
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sdmpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn sdmpc_status_str(status: SdmpcStatus) -> *const c_char {
    let s: &'static CStr = match status {
        SdmpcStatus::Ok => c"ok",
        SdmpcStatus::NullPointer => c"null pointer",
        SdmpcStatus::InvalidUtf8 => c"invalid utf-8",
        SdmpcStatus::InvalidConfig => c"invalid configuration",
        SdmpcStatus::SolverFailure => c"solver failure",
        SdmpcStatus::IoFailure => c"i/o failure",
        SdmpcStatus::OutOfRange => c"index out of range",
        SdmpcStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Bundled four-room benchmark configuration.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_benchmark(out: *mut *mut SdmpcConfig) -> SdmpcStatus {
    guard(|| {
        let handle = Box::into_raw(Box::new(SdmpcConfig {
            inner: ScenarioConfig::benchmark(),
        }));
        write_out(out, handle)
    })
}

/// Loads and validates a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_load(
    path: *const c_char,
    out: *mut *mut SdmpcConfig,
) -> SdmpcStatus {
    guard(|| {
        let path = try_status!(read_str(path));
        match ScenarioConfig::load(Path::new(path)) {
            Ok(inner) => write_out(out, Box::into_raw(Box::new(SdmpcConfig { inner }))),
            Err(e) => from_error(e),
        }
    })
}

/// Parses a configuration from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_parse(
    text: *const c_char,
    out: *mut *mut SdmpcConfig,
) -> SdmpcStatus {
    guard(|| {
        let text = try_status!(read_str(text));
        match ScenarioConfig::from_toml_str(text, Path::new("<string>")) {
            Ok(inner) => write_out(out, Box::into_raw(Box::new(SdmpcConfig { inner }))),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_set_seed(cfg: *mut SdmpcConfig, seed: u64) -> SdmpcStatus {
    guard(|| match cfg.as_mut() {
        Some(c) => {
            c.inner.seed = seed;
            SdmpcStatus::Ok
        }
        None => fail(SdmpcStatus::NullPointer, "config handle is NULL"),
    })
}

/// Enables or disables detection.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_set_defense(
    cfg: *mut SdmpcConfig,
    enabled: bool,
) -> SdmpcStatus {
    guard(|| match cfg.as_mut() {
        Some(c) => {
            c.inner.defense_enabled = enabled;
            SdmpcStatus::Ok
        }
        None => fail(SdmpcStatus::NullPointer, "config handle is NULL"),
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_set_steps(
    cfg: *mut SdmpcConfig,
    n_steps: usize,
) -> SdmpcStatus {
    guard(|| match cfg.as_mut() {
        Some(_) if n_steps == 0 => fail(SdmpcStatus::InvalidConfig, "n_steps: must be >= 1"),
        Some(c) => {
            c.inner.n_steps = n_steps;
            SdmpcStatus::Ok
        }
        None => fail(SdmpcStatus::NullPointer, "config handle is NULL"),
    })
}

/// # Safety
/// `cfg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_config_free(cfg: *mut SdmpcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a scenario; attacked modes also run the nominal baseline.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run(
    cfg: *const SdmpcConfig,
    mode: SdmpcMode,
    out: *mut *mut SdmpcRun,
) -> SdmpcStatus {
    guard(|| {
        let cfg = try_status!(config_ref(cfg));
        if out.is_null() {
            return fail(SdmpcStatus::NullPointer, "output pointer is NULL");
        }
        match run_scenario(cfg, mode.into()) {
            Ok(inner) => write_out(out, Box::into_raw(Box::new(SdmpcRun { inner }))),
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `run` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_free(run: *mut SdmpcRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_step_count(
    run: *const SdmpcRun,
    out: *mut usize,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        write_out(out, run.trace.steps.len())
    })
}

/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_agent_count(
    run: *const SdmpcRun,
    out: *mut usize,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        write_out(out, run.trace.n_agents())
    })
}

/// Applied input `u[k]` (first input channel) of one agent.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_input(
    run: *const SdmpcRun,
    step: usize,
    agent: usize,
    out: *mut f64,
) -> SdmpcStatus {
    guard(|| {
        let rec = try_status!(agent_step(try_status!(run_ref(run)), step, agent));
        write_out(out, rec.u[0])
    })
}

/// Output `y[k+1]` (first channel) of one agent.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_output(
    run: *const SdmpcRun,
    step: usize,
    agent: usize,
    out: *mut f64,
) -> SdmpcStatus {
    guard(|| {
        let rec = try_status!(agent_step(try_status!(run_ref(run)), step, agent));
        write_out(out, rec.y[0])
    })
}

/// Detection variable and flag. `flag` is -1 when detection did not run
/// for this step, otherwise 0 or 1; `e_val` is NaN when it did not run.
///
/// # Safety
/// `run` must be a live handle; `e_val` and `flag` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_detection(
    run: *const SdmpcRun,
    step: usize,
    agent: usize,
    e_val: *mut f64,
    flag: *mut i32,
) -> SdmpcStatus {
    guard(|| {
        let rec = try_status!(agent_step(try_status!(run_ref(run)), step, agent));
        if e_val.is_null() || flag.is_null() {
            return fail(SdmpcStatus::NullPointer, "output pointer is NULL");
        }
        let (e, f) = match &rec.detection {
            Some(d) => (d.e_val, i32::from(d.flag)),
            None => (f64::NAN, -1),
        };
        e_val.write(e);
        flag.write(f);
        SdmpcStatus::Ok
    })
}

/// Realized objective of one agent over the run.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_objective(
    run: *const SdmpcRun,
    agent: usize,
    out: *mut f64,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        match run.report.per_agent.get(agent) {
            Some(&j) => write_out(out, j),
            None => fail(SdmpcStatus::OutOfRange, format!("no agent {agent}")),
        }
    })
}

/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_global_objective(
    run: *const SdmpcRun,
    out: *mut f64,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        write_out(out, run.report.global)
    })
}

/// Percent error against the nominal baseline; NaN for nominal runs.
///
/// # Safety
/// `run` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_percent_error(
    run: *const SdmpcRun,
    agent: usize,
    out: *mut f64,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        if agent >= run.report.per_agent.len() {
            return fail(SdmpcStatus::OutOfRange, format!("no agent {agent}"));
        }
        let value = run
            .report
            .percent_error_per_agent
            .as_ref()
            .map_or(f64::NAN, |p| p[agent]);
        write_out(out, value)
    })
}

/// Writes `trace.csv`, `objectives.json` and `summary.txt` into `out_dir`.
///
/// # Safety
/// `run` must be a live handle; `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sdmpc_run_write_report(
    run: *const SdmpcRun,
    out_dir: *const c_char,
) -> SdmpcStatus {
    guard(|| {
        let run = try_status!(run_ref(run));
        let dir = try_status!(read_str(out_dir));
        match emit_report(
            &run.trace,
            &run.report,
            &run.mode.to_string(),
            Path::new(dir),
        ) {
            Ok(_) => SdmpcStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}
