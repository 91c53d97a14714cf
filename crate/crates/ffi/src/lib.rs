//! C interface to `dmc-core`.
//!
//! Every function returns a [`DmcStatus`]. On failure a message describing
//! the last error on the calling thread is available from
//! [`dmc_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function; freeing a null handle is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use dmc_core::dmc::inference::{dmc_cache_update, DmcHeadCache, UpdateKind};
use dmc_core::dmc::{DmcCache, DmcError};
use dmc_core::harness::checkpoint::{AttentionSpec, Checkpoint, CheckpointError};
use dmc_core::harness::eval::{compressed_cache, uncompressed_cache};
use dmc_core::model::{KvCache, ModelError, VanillaCache};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmcStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// The file could not be read.
    Io = 3,
    /// The file is not a valid checkpoint.
    Checkpoint = 4,
    /// The session reached the model's maximum sequence length.
    Capacity = 5,
    /// An output buffer is smaller than required.
    BufferTooSmall = 6,
    /// An internal error; the message has details.
    Internal = 7,
}

/// Cache used by a decoding session.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmcCacheKind {
    /// The checkpoint's compressed cache; uncompressed checkpoints fall back
    /// to the full cache.
    Default = 0,
    /// Full cache regardless of the checkpoint.
    Full = 1,
}

/// A loaded checkpoint.
pub struct DmcModel {
    checkpoint: Arc<Checkpoint>,
}

enum SessionCache {
    Full(VanillaCache),
    Compressed(DmcCache),
}

/// One decoding sequence with its own cache. Holds a reference to its
/// model, which may be freed first.
pub struct DmcSession {
    checkpoint: Arc<Checkpoint>,
    cache: SessionCache,
}

/// Compressed cache for a single attention head.
pub struct DmcHeadState {
    cache: DmcHeadCache,
    dim: usize,
    offset: f64,
}

/// Model dimensions reported by [`dmc_model_info`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DmcModelInfo {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Nonzero when the checkpoint decodes with a compressed cache.
    pub compressed: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(DmcStatus, String);

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let status = match e {
            CheckpointError::Io(..) => DmcStatus::Io,
            _ => DmcStatus::Checkpoint,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Capacity { .. } => DmcStatus::Capacity,
            ModelError::Token { .. } => DmcStatus::InvalidArgument,
            _ => DmcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<DmcError> for Failure {
    fn from(e: DmcError) -> Self {
        let status = match e {
            DmcError::Length(_) | DmcError::Config(_) => DmcStatus::InvalidArgument,
            _ => DmcStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DmcStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DmcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DmcStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dmc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmc_model_load(path: *const c_char, out: *mut *mut DmcModel) -> DmcStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(DmcStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(DmcModel {
            checkpoint: Arc::new(checkpoint),
        }));
        Ok(())
    })
}

/// Releases a model. Sessions created from it stay valid.
///
/// # Safety
/// `model` must be null or a handle from [`dmc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmc_model_free(model: *mut DmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fills `info` with the model's dimensions.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmc_model_info(model: *const DmcModel, info: *mut DmcModelInfo) -> DmcStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let info = deref_mut(info, "info")?;
        let c = &model.checkpoint.model.config;
        *info = DmcModelInfo {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            n_kv_heads: c.kv_heads(),
            head_dim: c.head_dim(),
            vocab_size: c.vocab_size,
            max_seq: c.max_seq,
            compressed: i32::from(matches!(
                model.checkpoint.manifest.attention,
                AttentionSpec::Compressed { .. }
            )),
        };
        Ok(())
    })
}

/// Starts a decoding session.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn dmc_session_new(
    model: *const DmcModel,
    kind: DmcCacheKind,
    out: *mut *mut DmcSession,
) -> DmcStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        let model = deref(model, "model")?;
        let ck = &model.checkpoint;
        let spec = &ck.manifest.attention;
        let cache = match (kind, spec) {
            (DmcCacheKind::Default, AttentionSpec::Compressed { .. }) => {
                SessionCache::Compressed(compressed_cache(&ck.model, spec).map_err(|e| {
                    Failure(DmcStatus::InvalidArgument, e.to_string())
                })?)
            }
            _ => SessionCache::Full(uncompressed_cache(&ck.model, spec)),
        };
        *out = Box::into_raw(Box::new(DmcSession {
            checkpoint: Arc::clone(ck),
            cache,
        }));
        Ok(())
    })
}

/// Releases a session.
///
/// # Safety
/// `session` must be null or a live handle from [`dmc_session_new`].
#[no_mangle]
pub unsafe extern "C" fn dmc_session_free(session: *mut DmcSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Feeds one token and writes the next-token logits (`vocab_size` values)
/// into `logits`.
///
/// # Safety
/// `session` must be valid and `logits` must point to `logits_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dmc_session_step(
    session: *mut DmcSession,
    token: u32,
    logits: *mut f64,
    logits_len: usize,
) -> DmcStatus {
    guard(|| {
        let s = deref_mut(session, "session")?;
        let vocab = s.checkpoint.model.config.vocab_size;
        if logits_len < vocab {
            return Err(Failure(
                DmcStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len} values, need {vocab}"),
            ));
        }
        let out = slice_mut(logits, logits_len, "logits")?;
        let cache: &mut dyn KvCache = match &mut s.cache {
            SessionCache::Full(c) => c,
            SessionCache::Compressed(c) => c,
        };
        let row = s.checkpoint.model.decode_step(token as usize, cache)?;
        out[..vocab].copy_from_slice(&row);
        Ok(())
    })
}

/// Tokens consumed by the session and slots currently cached over all
/// layers and heads.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmc_session_cache_stats(
    session: *const DmcSession,
    tokens: *mut usize,
    slots: *mut usize,
) -> DmcStatus {
    guard(|| {
        let s = deref(session, "session")?;
        let tokens = deref_mut(tokens, "tokens")?;
        let slots = deref_mut(slots, "slots")?;
        let (position, lengths) = match &s.cache {
            SessionCache::Full(c) => (c.position(), c.lengths()),
            SessionCache::Compressed(c) => (c.position(), c.lengths()),
        };
        *tokens = position;
        *slots = lengths.into_iter().flatten().sum();
        Ok(())
    })
}

/// Creates a compressed cache for one head of width `head_dim` (at least 2).
/// Merge decisions are `sigmoid(k[0] - decision_offset) >= 0.5`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmc_head_new(head_dim: usize, decision_offset: f64, out: *mut *mut DmcHeadState) -> DmcStatus {
    guard(|| {
        let out = deref_mut(out, "out")?;
        *out = std::ptr::null_mut();
        if head_dim < 2 || !decision_offset.is_finite() {
            return Err(Failure(
                DmcStatus::InvalidArgument,
                "head_dim must be at least 2 and decision_offset finite".into(),
            ));
        }
        *out = Box::into_raw(Box::new(DmcHeadState {
            cache: DmcHeadCache::new(head_dim),
            dim: head_dim,
            offset: decision_offset,
        }));
        Ok(())
    })
}

/// Releases a head cache.
///
/// # Safety
/// `head` must be null or a live handle from [`dmc_head_new`].
#[no_mangle]
pub unsafe extern "C" fn dmc_head_free(head: *mut DmcHeadState) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Reads the decision from `k[0]` and the importance from `q[0]`, zeroes
/// both in place and appends or merges `k`, `v` into the cache. `merged`
/// (optional) receives 1 when the token was merged into the last slot.
///
/// # Safety
/// `q`, `k` and `v` must each point to `head_dim` doubles; `merged` may be
/// null.
#[no_mangle]
pub unsafe extern "C" fn dmc_head_update(
    head: *mut DmcHeadState,
    q: *mut f64,
    k: *mut f64,
    v: *const f64,
    head_dim: usize,
    merged: *mut i32,
) -> DmcStatus {
    guard(|| {
        let h = deref_mut(head, "head")?;
        if head_dim != h.dim {
            return Err(Failure(DmcStatus::InvalidArgument, format!("head_dim {head_dim} does not match the cache")));
        }
        let q = slice_mut(q, head_dim, "q")?;
        let k = slice_mut(k, head_dim, "k")?;
        let v = slice(v, head_dim, "v")?;
        let (_, kind) = dmc_cache_update(&mut h.cache, q, k, v, h.offset)?;
        if !merged.is_null() {
            *merged = i32::from(kind == UpdateKind::Accumulated);
        }
        Ok(())
    })
}

/// Number of slots held and tokens consumed by a head cache.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dmc_head_len(head: *const DmcHeadState, slots: *mut usize, tokens: *mut usize) -> DmcStatus {
    guard(|| {
        let h = deref(head, "head")?;
        *deref_mut(slots, "slots")? = h.cache.len();
        *deref_mut(tokens, "tokens")? = h.cache.n_seen();
        Ok(())
    })
}

/// Copies slot `index`'s key and value (each `head_dim` doubles) out of a
/// head cache.
///
/// # Safety
/// `key` and `value` must each point to `head_dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dmc_head_slot(
    head: *const DmcHeadState,
    index: usize,
    key: *mut f64,
    value: *mut f64,
    head_dim: usize,
) -> DmcStatus {
    guard(|| {
        let h = deref(head, "head")?;
        if index >= h.cache.len() {
            return Err(Failure(
                DmcStatus::InvalidArgument,
                format!("slot {index} out of range for {} slots", h.cache.len()),
            ));
        }
        let (store, dim) = (h.cache.store(), h.dim);
        if head_dim != dim {
            return Err(Failure(DmcStatus::InvalidArgument, format!("head_dim {head_dim}, cache has {dim}")));
        }
        let r = index * dim..(index + 1) * dim;
        slice_mut(key, dim, "key")?.copy_from_slice(&store.keys()[r.clone()]);
        slice_mut(value, dim, "value")?.copy_from_slice(&store.values()[r]);
        Ok(())
    })
}
