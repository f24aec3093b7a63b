//! C ABI over the `lgat` crate.
//!
//! Models and sessions are opaque heap handles created and released by the
//! library. Every fallible call returns an [`LgatStatus`]; on failure the
//! message is available from [`lgat_last_error`] on the same thread. Token
//! ids cross the boundary as `uint32_t`, logits as `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use lgat::checkpoint;
use lgat::kvcache::audit;
use lgat::model::{decode, forward_with_cache, ModelCache};
use lgat::runconfig::RunConfig;
use lgat::{Error, ModelWeights, Rng, Sampler};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LgatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Shape = 6,
    TokenOutOfRange = 7,
    Overflow = 8,
    Panic = 9,
}

/// Loaded model weights.
pub struct LgatModel {
    weights: Arc<ModelWeights>,
}

/// Incremental decoding state bound to one model.
pub struct LgatSession {
    weights: Arc<ModelWeights>,
    cache: ModelCache,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LgatStatus {
    match e {
        Error::Config(_) | Error::Fixture(_) => LgatStatus::Config,
        Error::Invalid(_) | Error::Diverged { .. } => LgatStatus::InvalidArgument,
        Error::Io(_) => LgatStatus::Io,
        Error::Checkpoint(_) => LgatStatus::Checkpoint,
        Error::Shape { .. } => LgatStatus::Shape,
        Error::TokenOutOfRange { .. } => LgatStatus::TokenOutOfRange,
        Error::PositionOverflow { .. } | Error::CacheDiscontinuity { .. } => LgatStatus::Overflow,
    }
}

struct Fail(LgatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LgatStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LgatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LgatStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            LgatStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(LgatStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(LgatStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(LgatStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail(LgatStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(LgatStatus::NullPointer, "output handle is null".into()));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn tokens_of(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&t| t as usize).collect()
}

/// Message for the last failed call on this thread; empty after a
/// success. Owned by the library and valid until the next call.
#[no_mangle]
pub extern "C" fn lgat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a model from `key=value` configuration text, initialised from
/// its `seed` key.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_from_config(config_text: *const c_char, out: *mut *mut LgatModel) -> LgatStatus {
    guard(|| {
        let text = str_arg(config_text, "config_text")?;
        let run = RunConfig::from_text(text, &[])?;
        if run.models.len() != 1 {
            return Err(Fail(LgatStatus::Config, format!("expected one model, found {}", run.models.len())));
        }
        let cfg = run.model();
        let w = ModelWeights::build(cfg, &mut Rng::new(cfg.seed))?;
        out_handle(out, LgatModel { weights: Arc::new(w) })
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_load(path: *const c_char, out: *mut *mut LgatModel) -> LgatStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let w = checkpoint::load::<f64>(Path::new(p))?;
        out_handle(out, LgatModel { weights: Arc::new(w) })
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_save(model: *const LgatModel, path: *const c_char) -> LgatStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let p = str_arg(path, "path")?;
        checkpoint::save(&m.weights, Path::new(p))?;
        Ok(())
    })
}

/// Releases a model. Sessions created from it stay valid. Null is a no-op.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_free(model: *mut LgatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size, or 0 for a null model.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_vocab_size(model: *const LgatModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.config.vocab_size)
}

/// Longest sequence the model accepts, or 0 for a null model.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_max_seq_len(model: *const LgatModel) -> usize {
    model.as_ref().map_or(0, |m| m.weights.config.max_seq_len)
}

/// Total parameter count, or 0 for a null model.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lgat_model_param_count(model: *const LgatModel) -> u64 {
    model.as_ref().map_or(0, |m| m.weights.tally().total())
}

/// Full-sequence forward pass. Writes `n_tokens × vocab` logits row-major
/// into `logits`, whose length `logits_len` must match exactly.
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn lgat_forward_logits(
    model: *const LgatModel,
    tokens: *const u32,
    n_tokens: usize,
    logits: *mut f64,
    logits_len: usize,
) -> LgatStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ids = tokens_of(slice_arg(tokens, n_tokens, "tokens")?);
        let want = n_tokens * m.weights.config.vocab_size;
        if logits_len != want {
            return Err(invalid(format!("logits_len {logits_len}, expected {want}")));
        }
        let out = slice_out(logits, logits_len, "logits")?;
        let l = lgat::forward_full(&m.weights, &ids)?;
        out.copy_from_slice(l.data());
        Ok(())
    })
}

/// Greedy generation of `n_new` tokens after `prompt`; writes the new
/// tokens to `out_tokens` (length `n_new`).
///
/// # Safety
/// Pointers must be valid for the given lengths.
#[no_mangle]
pub unsafe extern "C" fn lgat_greedy_decode(
    model: *const LgatModel,
    prompt: *const u32,
    n_prompt: usize,
    n_new: usize,
    out_tokens: *mut u32,
) -> LgatStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ids = tokens_of(slice_arg(prompt, n_prompt, "prompt")?);
        let out = slice_out(out_tokens, n_new, "out_tokens")?;
        let d = decode(&m.weights, &ids, n_new, &mut Sampler::Greedy)?;
        for (o, &t) in out.iter_mut().zip(&d.tokens[n_prompt..]) {
            *o = t as u32;
        }
        Ok(())
    })
}

/// Starts an empty decoding session on `model`.
///
/// # Safety
/// `model` must come from this library; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgat_session_new(model: *const LgatModel, out: *mut *mut LgatSession) -> LgatStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let cache = ModelCache::new(&m.weights.config);
        out_handle(out, LgatSession { weights: Arc::clone(&m.weights), cache })
    })
}

/// Appends one token and writes the next-token logits (length `vocab`).
///
/// # Safety
/// `session` must come from this library; `logits` valid for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn lgat_session_step(
    session: *mut LgatSession,
    token: u32,
    logits: *mut f64,
    logits_len: usize,
) -> LgatStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| Fail(LgatStatus::NullPointer, "session is null".into()))?;
        let v = s.weights.config.vocab_size;
        if logits_len != v {
            return Err(invalid(format!("logits_len {logits_len}, expected {v}")));
        }
        let out = slice_out(logits, logits_len, "logits")?;
        let (l, _) = forward_with_cache(&s.weights, &[token as usize], &mut s.cache, false)?;
        out.copy_from_slice(l.row(0));
        Ok(())
    })
}

/// Tokens consumed so far, or 0 for a null session.
///
/// # Safety
/// `session` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn lgat_session_len(session: *const LgatSession) -> usize {
    session.as_ref().map_or(0, |s| s.cache.len())
}

/// # Safety
/// `session` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgat_session_free(session: *mut LgatSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// KV-cache audit of every model in `config_text`, as CSV. The string is
/// owned by the caller and must be released with [`lgat_string_free`].
///
/// # Safety
/// `config_text` must be NUL-terminated; `out_csv` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lgat_cache_audit_csv(config_text: *const c_char, out_csv: *mut *mut c_char) -> LgatStatus {
    guard(|| {
        if out_csv.is_null() {
            return Err(Fail(LgatStatus::NullPointer, "out_csv is null".into()));
        }
        let run = RunConfig::from_text(str_arg(config_text, "config_text")?, &[])?;
        let csv = audit(&run.models, run.dtype).to_csv();
        *out_csv = CString::new(csv).map_err(|_| invalid("CSV contains NUL"))?.into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lgat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

