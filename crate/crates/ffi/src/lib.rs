//! C ABI over the hybridevo engine.
//!
//! Handles are opaque and owned by the caller once returned; release them with
//! the matching `*_free`. Strings handed out by this library are NUL-terminated
//! UTF-8 and must be released with [`hybridevo_string_free`], except those
//! documented as borrowed. Every fallible call returns a [`HybridevoStatus`];
//! on failure [`hybridevo_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use hybridevo::cli::{self, Invocation, RunConfigFile};
use hybridevo::tasks::AnyTask;

/// Status codes. Values 0 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridevoStatus {
    Ok = 0,
    /// Bad configuration, usage, digest mismatch or I/O.
    Config = 1,
    /// Every candidate failed to parse; no solution.
    Extinct = 2,
    /// The provider failed; a checkpoint may allow resuming.
    Provider = 3,
    /// The candidate parsed but breaks a hard constraint.
    HardViolation = 4,
    /// The candidate text holds no parseable gene block.
    ParseFailure = 5,
    NullArgument = -1,
    InvalidUtf8 = -2,
    Panic = -3,
}

impl HybridevoStatus {
    fn from_exit(code: i32) -> Self {
        match code {
            cli::EXIT_OK => Self::Ok,
            cli::EXIT_EXTINCT => Self::Extinct,
            cli::EXIT_PROVIDER => Self::Provider,
            cli::EXIT_HARD_VIOLATION => Self::HardViolation,
            cli::EXIT_PARSE_FAILURE => Self::ParseFailure,
            _ => Self::Config,
        }
    }
}

/// A loaded task manifest.
pub struct HybridevoTask {
    task: AnyTask,
    kind: CString,
}

/// The outcome of a finished or aborted run.
pub struct HybridevoRun {
    status: HybridevoStatus,
    render: CString,
    report: Option<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(text).expect("NULs stripped")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn owned(s: impl Into<String>) -> CString {
    CString::new(s.into().replace('\0', " ")).expect("NULs stripped")
}

unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, HybridevoStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(HybridevoStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        HybridevoStatus::InvalidUtf8
    })
}

fn guarded(f: impl FnOnce() -> Result<(), HybridevoStatus>) -> HybridevoStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HybridevoStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            HybridevoStatus::Panic
        }
    }
}

fn out_ptr<T>(out: *mut *mut T) -> Result<&'static mut *mut T, HybridevoStatus> {
    if out.is_null() {
        set_error("output pointer is null");
        return Err(HybridevoStatus::NullArgument);
    }
    // SAFETY: caller passes a writable pointer slot.
    let slot = unsafe { &mut *out };
    *slot = ptr::null_mut();
    Ok(slot)
}

/// Library version, borrowed and static.
#[no_mangle]
pub extern "C" fn hybridevo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Borrowed; valid
/// until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn hybridevo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a task manifest.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_task_load(
    manifest_path: *const c_char,
    out: *mut *mut HybridevoTask,
) -> HybridevoStatus {
    guarded(|| {
        let slot = out_ptr(out)?;
        let path = arg(manifest_path, "manifest_path")?;
        let task = AnyTask::load(Path::new(path)).map_err(|e| {
            set_error(e.to_string());
            HybridevoStatus::Config
        })?;
        let kind = owned(task.kind());
        *slot = Box::into_raw(Box::new(HybridevoTask { task, kind }));
        Ok(())
    })
}

/// Releases a task. Null is ignored.
///
/// # Safety
/// `task` must come from [`hybridevo_task_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_task_free(task: *mut HybridevoTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// The task's kind identifier. Borrowed; lives as long as the task.
///
/// # Safety
/// `task` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_task_kind(task: *const HybridevoTask) -> *const c_char {
    task.as_ref().map_or(ptr::null(), |t| t.kind.as_ptr())
}

/// Content digest of the task (hex). Free with [`hybridevo_string_free`].
///
/// # Safety
/// `task` must be a live handle; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_task_digest(task: *const HybridevoTask, out: *mut *mut c_char) -> HybridevoStatus {
    guarded(|| {
        let slot = out_ptr(out)?;
        let t = task.as_ref().ok_or_else(|| {
            set_error("task is null");
            HybridevoStatus::NullArgument
        })?;
        *slot = owned(t.task.digest()).into_raw();
        Ok(())
    })
}

/// Parses `candidate_text` as a gene of the task's kind and checks its
/// constraints. `out_json` receives the verdict (`status` plus `violations`
/// or `error`) whenever the return value is `Ok`, `HardViolation` or
/// `ParseFailure`.
///
/// # Safety
/// `task` must be a live handle, `candidate_text` NUL-terminated, `out_json`
/// a writable slot.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_task_validate(
    task: *const HybridevoTask,
    candidate_text: *const c_char,
    out_json: *mut *mut c_char,
) -> HybridevoStatus {
    let mut verdict = HybridevoStatus::Ok;
    let status = guarded(|| {
        let slot = out_ptr(out_json)?;
        let t = task.as_ref().ok_or_else(|| {
            set_error("task is null");
            HybridevoStatus::NullArgument
        })?;
        let text = arg(candidate_text, "candidate_text")?;
        let (value, code) = cli::check_candidate(&t.task, text);
        *slot = owned(value.to_string()).into_raw();
        verdict = HybridevoStatus::from_exit(code);
        Ok(())
    });
    if status == HybridevoStatus::Ok {
        verdict
    } else {
        status
    }
}

fn finish_run(inv: Invocation, report_path: &Path, slot: &mut *mut HybridevoRun) -> Result<(), HybridevoStatus> {
    let status = HybridevoStatus::from_exit(inv.code);
    if let Some(e) = &inv.error {
        set_error(e.clone());
    }
    if status == HybridevoStatus::Config {
        if inv.error.is_none() {
            set_error("run failed");
        }
        return Err(status);
    }
    let report = std::fs::read_to_string(report_path).ok().map(owned);
    *slot = Box::into_raw(Box::new(HybridevoRun { status, render: owned(inv.stdout.trim_end()), report }));
    Ok(())
}

/// Runs the configuration file at `config_path`, as `hybridevo run` does.
/// `report_path` may be null to keep the configured location.
///
/// A run handle is produced for every outcome except configuration errors,
/// including extinct and provider-aborted runs; the return value tells which.
///
/// # Safety
/// Strings must be NUL-terminated (or null where allowed); `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_run(
    config_path: *const c_char,
    report_path: *const c_char,
    out: *mut *mut HybridevoRun,
) -> HybridevoStatus {
    let mut outcome = HybridevoStatus::Ok;
    let status = guarded(|| {
        let slot = out_ptr(out)?;
        let config = arg(config_path, "config_path")?;
        let report = if report_path.is_null() {
            let cfg = RunConfigFile::load(Path::new(config)).map_err(|e| {
                set_error(e.to_string());
                HybridevoStatus::Config
            })?;
            cfg.report_path()
        } else {
            PathBuf::from(arg(report_path, "report_path")?)
        };
        let inv =
            cli::invoke(["hybridevo", "run", "--config", config, "--report", report.to_str().unwrap_or_default()]);
        finish_run(inv, &report, slot)?;
        // SAFETY: just written by finish_run.
        outcome = unsafe { (**slot).status };
        Ok(())
    });
    if status == HybridevoStatus::Ok {
        outcome
    } else {
        status
    }
}

/// Continues a run from its checkpoint, as `hybridevo resume` does, writing
/// the report to `report_path`.
///
/// # Safety
/// Strings must be NUL-terminated; `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_resume(
    checkpoint_path: *const c_char,
    report_path: *const c_char,
    out: *mut *mut HybridevoRun,
) -> HybridevoStatus {
    let mut outcome = HybridevoStatus::Ok;
    let status = guarded(|| {
        let slot = out_ptr(out)?;
        let cp = arg(checkpoint_path, "checkpoint_path")?;
        let report = arg(report_path, "report_path")?;
        let inv = cli::invoke(["hybridevo", "resume", cp, "--report", report]);
        finish_run(inv, Path::new(report), slot)?;
        // SAFETY: just written by finish_run.
        outcome = unsafe { (**slot).status };
        Ok(())
    });
    if status == HybridevoStatus::Ok {
        outcome
    } else {
        status
    }
}

/// Status the run ended with.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_run_status(run: *const HybridevoRun) -> HybridevoStatus {
    run.as_ref().map_or(HybridevoStatus::NullArgument, |r| r.status)
}

/// Rendered best solution, empty when there is none. Borrowed; lives as long
/// as the run.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_run_best_render(run: *const HybridevoRun) -> *const c_char {
    run.as_ref().map_or(ptr::null(), |r| r.render.as_ptr())
}

/// The run report JSON, or null when no report was written. Borrowed; lives
/// as long as the run.
///
/// # Safety
/// `run` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_run_report_json(run: *const HybridevoRun) -> *const c_char {
    run.as_ref().and_then(|r| r.report.as_ref()).map_or(ptr::null(), |s| s.as_ptr())
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn hybridevo_run_free(run: *mut HybridevoRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
