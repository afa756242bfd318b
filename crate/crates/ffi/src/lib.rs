//! C ABI over the continual-learning harness.
//!
//! Every function returns a [`CmoeStatus`]; on failure the message is kept
//! per thread and can be read with [`cmoe_last_error`]. Learners are opaque
//! handles created by `cmoe_learner_new` or `cmoe_learner_load` and released
//! with `cmoe_learner_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cmoe::config::{RoutingMode, RunConfig};
use cmoe::harness::{summarize, write_outputs, Learner};
use cmoe::Error;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    Version = 6,
    Numeric = 7,
    Contract = 8,
    Structural = 9,
    Replay = 10,
    BufferTooSmall = 11,
    NotAvailable = 12,
    Panic = 13,
}

/// Opaque learner handle.
pub struct CmoeLearner {
    inner: Learner,
}

/// Summary of one routing mode over a complete accuracy matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CmoeSummary {
    pub mean_immediate: f64,
    pub mean_last: f64,
    /// Backward transfer as an accuracy fraction.
    pub bwt: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> CmoeStatus {
    match e.root() {
        Error::Config { .. } => CmoeStatus::Config,
        Error::Io { .. } => CmoeStatus::Io,
        Error::Corrupt { .. } => CmoeStatus::Corrupt,
        Error::Version { .. } => CmoeStatus::Version,
        Error::Numeric { .. } => CmoeStatus::Numeric,
        Error::Contract(_) | Error::Index { .. } | Error::Dimension { .. } => CmoeStatus::Contract,
        Error::Structural(_) => CmoeStatus::Structural,
        Error::ReplayViolation { .. } => CmoeStatus::Replay,
        Error::Stage { .. } => CmoeStatus::Contract,
    }
}

enum Fail {
    Status(CmoeStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CmoeStatus::Ok
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CmoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CmoeStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(CmoeStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn learner_ref<'a>(p: *const CmoeLearner) -> Result<&'a Learner, Fail> {
    p.as_ref().map(|l| &l.inner).ok_or_else(|| null("learner"))
}

unsafe fn learner_mut<'a>(p: *mut CmoeLearner) -> Result<&'a mut Learner, Fail> {
    p.as_mut().map(|l| &mut l.inner).ok_or_else(|| null("learner"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(value);
    Ok(())
}

/// Copies `text` plus a terminating NUL into `buf`. `needed` (optional)
/// receives the required size including the NUL.
unsafe fn copy_text(text: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let n = text.len() + 1;
    if !needed.is_null() {
        needed.write(n);
    }
    if buf.is_null() || cap < n {
        return Err(Fail::Status(
            CmoeStatus::BufferTooSmall,
            format!("buffer of {cap} bytes, {n} needed"),
        ));
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    buf.add(text.len()).write(0);
    Ok(())
}

fn routing(name: &str) -> Result<RoutingMode, Fail> {
    Ok(name.parse::<RoutingMode>()?)
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null; `needed` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> CmoeStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_text(&msg, buf, cap, needed) {
        Ok(()) => CmoeStatus::Ok,
        Err(_) => CmoeStatus::BufferTooSmall,
    }
}

/// Static, NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn cmoe_status_name(status: CmoeStatus) -> *const c_char {
    let s: &'static CStr = match status {
        CmoeStatus::Ok => c"ok",
        CmoeStatus::NullPointer => c"null pointer",
        CmoeStatus::InvalidUtf8 => c"invalid utf-8",
        CmoeStatus::Config => c"config error",
        CmoeStatus::Io => c"io error",
        CmoeStatus::Corrupt => c"corrupt checkpoint",
        CmoeStatus::Version => c"version mismatch",
        CmoeStatus::Numeric => c"numeric error",
        CmoeStatus::Contract => c"contract violated",
        CmoeStatus::Structural => c"structural error",
        CmoeStatus::Replay => c"replay violation",
        CmoeStatus::BufferTooSmall => c"buffer too small",
        CmoeStatus::NotAvailable => c"not available",
        CmoeStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Builds a learner from a TOML config; a null `config_toml` selects the
/// built-in defaults.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_new(config_toml: *const c_char, out: *mut *mut CmoeLearner) -> CmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        let learner = Learner::new(cfg)?;
        out.write(Box::into_raw(Box::new(CmoeLearner { inner: learner })));
        Ok(())
    })
}

/// Restores a learner from a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_load(dir: *const c_char, out: *mut *mut CmoeLearner) -> CmoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let learner = Learner::load_checkpoint(Path::new(str_arg(dir, "dir")?))?;
        out.write(Box::into_raw(Box::new(CmoeLearner { inner: learner })));
        Ok(())
    })
}

/// Releases a learner. Null is ignored.
///
/// # Safety
/// `learner` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_free(learner: *mut CmoeLearner) {
    if !learner.is_null() {
        drop(Box::from_raw(learner));
    }
}

/// Trains the next task of the stream and records its accuracy rows.
///
/// # Safety
/// `learner` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_step(learner: *mut CmoeLearner) -> CmoeStatus {
    guard(|| {
        let l = learner_mut(learner)?;
        if l.is_finished() {
            return Err(Fail::Status(CmoeStatus::NotAvailable, "every task is already trained".into()));
        }
        Ok(l.step()?)
    })
}

/// Trains every remaining task.
///
/// # Safety
/// `learner` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_run(learner: *mut CmoeLearner) -> CmoeStatus {
    guard(|| Ok(learner_mut(learner)?.run()?))
}

/// Number of tasks in the stream and number trained so far.
///
/// # Safety
/// `learner` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_progress(
    learner: *const CmoeLearner,
    n_tasks: *mut usize,
    trained: *mut usize,
) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        if n_tasks.is_null() || trained.is_null() {
            return Err(null("out"));
        }
        write_out(n_tasks, l.specs().len())?;
        write_out(trained, l.next_task())
    })
}

/// Accuracy on task `eval_task` after training task `after_task` under a
/// routing mode named `ptl`, `oracle`, `last`, `random` or `shared`.
///
/// # Safety
/// `learner` must be a live handle, `routing_mode` a NUL-terminated string
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_accuracy(
    learner: *const CmoeLearner,
    routing_mode: *const c_char,
    after_task: usize,
    eval_task: usize,
    out: *mut f64,
) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        let mode = routing(str_arg(routing_mode, "routing_mode")?)?;
        let m = l
            .matrices
            .get(&mode)
            .ok_or_else(|| Fail::Status(CmoeStatus::NotAvailable, format!("routing `{mode}` was not evaluated")))?;
        let v = m.get(after_task, eval_task).ok_or_else(|| {
            Fail::Status(
                CmoeStatus::NotAvailable,
                format!("no accuracy for after_task {after_task}, eval_task {eval_task}"),
            )
        })?;
        write_out(out, v)
    })
}

/// Immediate and last mean accuracy plus backward transfer of a routing
/// mode once the stream is complete.
///
/// # Safety
/// `learner` must be a live handle, `routing_mode` a NUL-terminated string
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_summary(
    learner: *const CmoeLearner,
    routing_mode: *const c_char,
    out: *mut CmoeSummary,
) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        let mode = routing(str_arg(routing_mode, "routing_mode")?)?;
        let m = l
            .matrices
            .get(&mode)
            .ok_or_else(|| Fail::Status(CmoeStatus::NotAvailable, format!("routing `{mode}` was not evaluated")))?;
        if !m.is_complete() {
            return Err(Fail::Status(CmoeStatus::NotAvailable, "the stream is not finished".into()));
        }
        let s = summarize(m)?;
        write_out(
            out,
            CmoeSummary {
                mean_immediate: s.mean_immediate,
                mean_last: s.mean_last,
                bwt: s.bwt,
            },
        )
    })
}

/// Parameters added by probe-guided growth relative to growing every layer.
///
/// # Safety
/// `learner` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_param_ratio(learner: *const CmoeLearner, out: *mut f64) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        let r = l
            .param_ratio()
            .ok_or_else(|| Fail::Status(CmoeStatus::NotAvailable, "no task has grown yet".into()))?;
        write_out(out, r)
    })
}

/// Writes the metrics table (CSV) into `buf`. On `BUFFER_TOO_SMALL`,
/// `needed` still receives the required size.
///
/// # Safety
/// `learner` must be a live handle; `buf` must point to `cap` writable
/// bytes or be null; `needed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_metrics_csv(
    learner: *const CmoeLearner,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> CmoeStatus {
    guard(|| {
        let csv = learner_ref(learner)?.metrics_csv()?;
        copy_text(&csv, buf, cap, needed)
    })
}

/// Saves a checkpoint into `dir`.
///
/// # Safety
/// `learner` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_save(learner: *const CmoeLearner, dir: *const c_char) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        Ok(l.save_checkpoint(Path::new(str_arg(dir, "dir")?))?)
    })
}

/// Writes manifest, metrics and checkpoint into `dir`.
///
/// # Safety
/// `learner` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cmoe_learner_write_outputs(learner: *const CmoeLearner, dir: *const c_char) -> CmoeStatus {
    guard(|| {
        let l = learner_ref(learner)?;
        Ok(write_outputs(l, Path::new(str_arg(dir, "dir")?))?)
    })
}
