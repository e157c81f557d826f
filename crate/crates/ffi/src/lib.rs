//! C ABI over checkpoints, evaluation and the drop schedule.
//!
//! Every function returns a [`SeftStatus`]; on failure the message is
//! available from [`seft_last_error`] on the same thread. Panics are caught
//! at the boundary and reported as `SEFT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use seft_core::checkpoint::{audit, Checkpoint};
use seft_core::data::{next_token_samples, TokenBatch};
use seft_core::eval::evaluate;
use seft_core::evolution::EvolutionSchedule;
use seft_core::pruner::Pattern;
use seft_core::Error;

/// Opaque checkpoint handle.
pub struct SeftCheckpoint {
    inner: Checkpoint,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Invariant = 5,
    Numeric = 6,
    Panic = 7,
}

const EVAL_BATCH: usize = 16;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SeftStatus {
    match e {
        Error::Io(_) => SeftStatus::Io,
        Error::Format { .. } => SeftStatus::Format,
        Error::Invariant(_) | Error::Shape { .. } => SeftStatus::Invariant,
        Error::Numeric(_) | Error::NotScalar(_) => SeftStatus::Numeric,
        _ => SeftStatus::InvalidArgument,
    }
}

struct Fail(SeftStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SeftStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SeftStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SeftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SeftStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| p.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_error(&format!("panic: {msg}"));
            SeftStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a>(ck: *const SeftCheckpoint) -> Result<&'a Checkpoint, Fail> {
    ck.as_ref().map(|h| &h.inner).ok_or_else(|| null("checkpoint"))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    out.write(v);
    Ok(())
}

/// Loads a checkpoint file into a new handle stored at `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_load(path: *const c_char, out: *mut *mut SeftCheckpoint) -> SeftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Checkpoint::load(&path_arg(path)?)?;
        out.write(Box::into_raw(Box::new(SeftCheckpoint { inner })));
        Ok(())
    })
}

/// Writes `ck` to `path` atomically.
///
/// # Safety
/// `ck` must come from this library and `path` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_save(ck: *const SeftCheckpoint, path: *const c_char) -> SeftStatus {
    guard(|| Ok(handle(ck)?.save(&path_arg(path)?)?))
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `ck` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_free(ck: *mut SeftCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// Folds mask, delta and adapters into a new dense checkpoint.
///
/// # Safety
/// `ck` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_merge(ck: *const SeftCheckpoint, out: *mut *mut SeftCheckpoint) -> SeftStatus {
    guard(|| {
        let merged = handle(ck)?.merge()?;
        write(out, Box::into_raw(Box::new(SeftCheckpoint { inner: merged })))
    })
}

/// Number of prunable weight matrices.
///
/// # Safety
/// `ck` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_tensor_count(ck: *const SeftCheckpoint, out: *mut usize) -> SeftStatus {
    guard(|| write(out, handle(ck)?.params.named_prunable().len()))
}

/// Fraction of zero coordinates over the merged prunable weights.
///
/// # Safety
/// `ck` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_sparsity(ck: *const SeftCheckpoint, out: *mut f64) -> SeftStatus {
    guard(|| write(out, handle(ck)?.sparsity()?))
}

/// Number of delta entries across all tensors.
///
/// # Safety
/// `ck` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_delta_entries(ck: *const SeftCheckpoint, out: *mut usize) -> SeftStatus {
    guard(|| write(out, handle(ck)?.delta.total_entries()))
}

/// Counts aligned groups of `m` merged weights holding more than `n`
/// nonzeros. Reports the count through `violations`; the status stays OK.
///
/// # Safety
/// `ck` must come from this library and `violations` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_checkpoint_check_nm(
    ck: *const SeftCheckpoint,
    n: u32,
    m: u32,
    violations: *mut usize,
) -> SeftStatus {
    guard(|| {
        let pattern = Pattern::NM {
            n: n as usize,
            m: m as usize,
        };
        pattern.validate()?;
        let a = audit(handle(ck)?, Some(pattern))?;
        write(violations, a.violations())
    })
}

/// Perplexity of the merged model on `len` bytes of text, cut into
/// non-overlapping windows of the model's context length.
///
/// # Safety
/// `ck` must come from this library, `text` point to `len` readable bytes
/// and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_evaluate_ppl(
    ck: *const SeftCheckpoint,
    text: *const u8,
    len: usize,
    out: *mut f64,
) -> SeftStatus {
    guard(|| {
        let ck = handle(ck)?;
        if text.is_null() {
            return Err(null("text"));
        }
        let bytes = std::slice::from_raw_parts(text, len);
        let tokens: Vec<usize> = bytes.iter().map(|&b| usize::from(b)).collect();
        let context = match &ck.arch {
            seft_core::model::Architecture::Transformer(c) => c.context,
            _ => return Err(invalid("checkpoint is not a language model")),
        };
        let samples = next_token_samples(&tokens, context);
        if samples.is_empty() {
            return Err(invalid(format!("text shorter than one window of {} bytes", context + 1)));
        }
        let batches = samples
            .chunks(EVAL_BATCH)
            .map(|c| TokenBatch::from_samples(&c.iter().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        let r = evaluate(&ck.arch, &ck.merged_params()?, &batches)?;
        write(out, r.ppl)
    })
}

/// Entries swapped at step `t` under the cosine drop schedule.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seft_tau(drop_rate: f64, t: usize, total_steps: usize, budget: usize, out: *mut usize) -> SeftStatus {
    guard(|| {
        let s = EvolutionSchedule {
            drop_rate,
            total_steps,
            ..EvolutionSchedule::default()
        };
        s.validate()?;
        write(out, s.tau(t, budget))
    })
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn seft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seft_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
