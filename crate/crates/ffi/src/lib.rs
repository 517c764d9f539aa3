//! C ABI over the poolkv pool, coherent sessions, block hashing and the
//! shared-memory RPC channel.
//!
//! Every fallible function returns a [`PkvStatus`]. On failure the message
//! is kept per thread and can be copied out with [`pkv_last_error`].
//! Handles are opaque heap objects owned by the caller and released with the
//! matching `*_free` function. A pool handle may be shared across threads. A
//! session or RPC client handle must be used by one thread at a time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;
use std::sync::Arc;
use std::time::{Duration, Instant};

use poolkv::coherence::{CoherenceError, CoherentSession};
use poolkv::index::{chain_hash, BlockHash, IndexError};
use poolkv::pool::{translate, Pool, PoolAddress, PoolConfig, PoolError};
use poolkv::rpc::{create_channel, echo, RpcClient, RpcError, RpcServer};

/// Result code of every fallible call. `PKV_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkvStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    OutOfRange = 4,
    OutOfSpace = 5,
    NotFound = 6,
    AlreadyExists = 7,
    Timeout = 8,
    Remote = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Geometry of an attached pool.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PkvPoolInfo {
    pub pool_bytes: u64,
    pub device_count: u32,
    pub interleave: bool,
    pub chunk_bytes: u64,
    pub block_bytes: u64,
    pub block_count: u64,
    pub live_blocks: u64,
}

/// Opaque pool handle.
pub struct PkvPool {
    inner: Arc<Pool>,
}

/// Opaque coherent-session handle. Holds a reference to its pool.
pub struct PkvSession {
    inner: CoherentSession,
}

/// Opaque RPC client handle. Holds a reference to its pool.
pub struct PkvRpcClient {
    inner: RpcClient,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(PkvStatus, String);

impl Failure {
    fn new(status: PkvStatus, msg: impl Into<String>) -> Self {
        Failure(status, msg.into())
    }
}

impl From<PoolError> for Failure {
    fn from(e: PoolError) -> Self {
        let status = match &e {
            PoolError::InvalidConfig(_) | PoolError::Misaligned(_) | PoolError::DoubleFree(_) => {
                PkvStatus::InvalidArgument
            }
            PoolError::Io { .. } | PoolError::BadRegion(..) => PkvStatus::Io,
            PoolError::OutOfRange { .. } => PkvStatus::OutOfRange,
            PoolError::OutOfSpace | PoolError::DirectoryFull => PkvStatus::OutOfSpace,
            PoolError::ChannelExists(_) => PkvStatus::AlreadyExists,
        };
        Failure(status, e.to_string())
    }
}

impl From<CoherenceError> for Failure {
    fn from(e: CoherenceError) -> Self {
        match e {
            CoherenceError::Pool(p) => p.into(),
            other => Failure(PkvStatus::InvalidArgument, other.to_string()),
        }
    }
}

impl From<RpcError> for Failure {
    fn from(e: RpcError) -> Self {
        let msg = e.to_string();
        match e {
            RpcError::Coherence(c) => c.into(),
            RpcError::Pool(p) => p.into(),
            RpcError::NoSpace(_) => Failure(PkvStatus::OutOfSpace, msg),
            RpcError::NoSuchChannel(_) => Failure(PkvStatus::NotFound, msg),
            RpcError::Timeout(_) | RpcError::ChannelFull(_) => Failure(PkvStatus::Timeout, msg),
            RpcError::Remote(_) => Failure(PkvStatus::Remote, msg),
            RpcError::InvalidGeometry(_) | RpcError::TooLarge { .. } | RpcError::InvalidTransition { .. } => {
                Failure(PkvStatus::InvalidArgument, msg)
            }
        }
    }
}

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        Failure(PkvStatus::InvalidArgument, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PkvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PkvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside poolkv");
            PkvStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(PkvStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    non_null(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::new(PkvStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn bytes_in<'a>(data: *const u8, len: usize, name: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(data, name)?;
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn bytes_out<'a>(data: *mut u8, len: usize, name: &str) -> Result<&'a mut [u8], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(data, name)?;
    Ok(slice::from_raw_parts_mut(data, len))
}

unsafe fn pool_ref<'a>(pool: *const PkvPool) -> Result<&'a Arc<Pool>, Failure> {
    non_null(pool, "pool")?;
    Ok(&(*pool).inner)
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pkv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a file-backed pool at `path` and returns a handle in `out`.
/// A zero `chunk_bytes` selects linear placement.
///
/// # Safety
/// `path` must be a NUL-terminated string. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_create(
    path: *const c_char,
    pool_bytes: u64,
    device_count: u32,
    block_bytes: u64,
    chunk_bytes: u64,
    out: *mut *mut PkvPool,
) -> PkvStatus {
    guard(|| {
        non_null(out, "out")?;
        let mut cfg = PoolConfig::new(path_arg(path)?, pool_bytes, device_count, block_bytes);
        cfg = if chunk_bytes == 0 { cfg.with_interleave(false) } else { cfg.with_chunk(chunk_bytes) };
        let pool = Pool::create(cfg)?;
        *out = Box::into_raw(Box::new(PkvPool { inner: Arc::new(pool) }));
        Ok(())
    })
}

/// Attaches to an existing pool at `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_attach(path: *const c_char, out: *mut *mut PkvPool) -> PkvStatus {
    guard(|| {
        non_null(out, "out")?;
        let pool = Pool::attach(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PkvPool { inner: Arc::new(pool) }));
        Ok(())
    })
}

/// Releases a pool handle. The mapping stays alive while sessions or
/// clients created from it exist. Null is ignored.
///
/// # Safety
/// `pool` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_free(pool: *mut PkvPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// Fills `info` with the pool geometry.
///
/// # Safety
/// `pool` must be a live handle and `info` writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_info(pool: *const PkvPool, info: *mut PkvPoolInfo) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(info, "info")?;
        let cfg = pool.config();
        *info = PkvPoolInfo {
            pool_bytes: cfg.pool_bytes,
            device_count: cfg.device_count,
            interleave: cfg.interleave,
            chunk_bytes: cfg.interleave_chunk_bytes,
            block_bytes: cfg.block_bytes,
            block_count: cfg.block_count(),
            live_blocks: pool.live_blocks(),
        };
        Ok(())
    })
}

/// Maps a logical pool offset to its device index and device-local offset.
///
/// # Safety
/// `pool` must be a live handle; `device` and `device_offset` writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_translate(
    pool: *const PkvPool,
    offset: u64,
    device: *mut u32,
    device_offset: *mut u64,
) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(device, "device")?;
        non_null(device_offset, "device_offset")?;
        let c = translate(offset, pool.config())?;
        *device = c.device_index;
        *device_offset = c.device_offset;
        Ok(())
    })
}

/// Allocates one block and writes its pool offset to `offset`.
///
/// # Safety
/// `pool` must be a live handle and `offset` writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_alloc_block(pool: *const PkvPool, offset: *mut u64) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(offset, "offset")?;
        *offset = pool.alloc_block()?.offset;
        Ok(())
    })
}

/// Frees the block starting at `offset`.
///
/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_free_block(pool: *const PkvPool, offset: u64) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        let block = pool.config().block_bytes;
        pool.free_block(PoolAddress::new(offset, block))?;
        Ok(())
    })
}

/// Copies per-device written byte counters into `out`. `len` must be at
/// least the device count. `written` receives the device count.
///
/// # Safety
/// `pool` must be a live handle, `out` must hold `len` u64 values and
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_pool_device_load(
    pool: *const PkvPool,
    out: *mut u64,
    len: usize,
    written: *mut usize,
) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(written, "written")?;
        let load = pool.device_load_report();
        *written = load.len();
        if len < load.len() {
            return Err(Failure::new(
                PkvStatus::BufferTooSmall,
                format!("need {} counters, buffer holds {len}", load.len()),
            ));
        }
        non_null(out, "out")?;
        slice::from_raw_parts_mut(out, load.len()).copy_from_slice(&load);
        Ok(())
    })
}

/// Opens a coherent session with a private host cache over `pool`.
///
/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_new(pool: *const PkvPool, out: *mut *mut PkvSession) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(out, "out")?;
        *out = Box::into_raw(Box::new(PkvSession { inner: CoherentSession::new(Arc::clone(pool)) }));
        Ok(())
    })
}

/// Releases a session without flushing dirty lines. Null is ignored.
///
/// # Safety
/// `session` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_free(session: *mut PkvSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

unsafe fn session_mut<'a>(session: *mut PkvSession) -> Result<&'a mut CoherentSession, Failure> {
    non_null(session, "session")?;
    Ok(&mut (*session).inner)
}

/// Writes `len` bytes at `offset` straight to the pool, dropping any cached
/// copy of the touched lines.
///
/// # Safety
/// `session` must be a live handle; `data` must hold `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_bypass_write(
    session: *mut PkvSession,
    offset: u64,
    data: *const u8,
    len: usize,
) -> PkvStatus {
    guard(|| {
        let s = session_mut(session)?;
        s.bypass_write(offset, bytes_in(data, len, "data")?)?;
        Ok(())
    })
}

/// Writes through the host cache. Data reaches the pool on flush or eviction.
///
/// # Safety
/// `session` must be a live handle; `data` must hold `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_cached_write(
    session: *mut PkvSession,
    offset: u64,
    data: *const u8,
    len: usize,
) -> PkvStatus {
    guard(|| {
        let s = session_mut(session)?;
        s.cached_write(offset, bytes_in(data, len, "data")?)?;
        Ok(())
    })
}

/// Writes back dirty cached lines overlapping `[offset, offset + len)`.
///
/// # Safety
/// `session` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_flush(session: *mut PkvSession, offset: u64, len: u64) -> PkvStatus {
    guard(|| {
        session_mut(session)?.flush(offset, len)?;
        Ok(())
    })
}

/// Reads `len` bytes at `offset`, observing every write that reached the
/// pool before the call.
///
/// # Safety
/// `session` must be a live handle; `out` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pkv_session_read_fresh(
    session: *mut PkvSession,
    offset: u64,
    out: *mut u8,
    len: usize,
) -> PkvStatus {
    guard(|| {
        let s = session_mut(session)?;
        s.read_fresh(offset, bytes_out(out, len, "out")?)?;
        Ok(())
    })
}

/// Computes the chained hash of one full block of `n_tokens` tokens.
/// `parent` is null for the first block. Hashes are 16 little-endian bytes.
///
/// # Safety
/// `parent` must be null or point to 16 bytes, `tokens` to `n_tokens`
/// values and `out` to 16 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pkv_chain_hash(
    parent: *const u8,
    tokens: *const u32,
    n_tokens: usize,
    block_tokens: usize,
    out: *mut u8,
) -> PkvStatus {
    guard(|| {
        non_null(out, "out")?;
        let parent = if parent.is_null() {
            BlockHash::ROOT
        } else {
            let mut b = [0u8; 16];
            b.copy_from_slice(slice::from_raw_parts(parent, 16));
            BlockHash::from_le_bytes(b)
        };
        let tokens: &[u32] = if n_tokens == 0 {
            &[]
        } else {
            non_null(tokens, "tokens")?;
            slice::from_raw_parts(tokens, n_tokens)
        };
        let h = chain_hash(parent, tokens, block_tokens)?;
        slice::from_raw_parts_mut(out, 16).copy_from_slice(&h.to_le_bytes());
        Ok(())
    })
}

/// Lays out RPC channel `id` with `slot_count` slots of `payload_bytes`
/// request and response space.
///
/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkv_rpc_channel_create(
    pool: *const PkvPool,
    id: u32,
    slot_count: u32,
    payload_bytes: u32,
) -> PkvStatus {
    guard(|| {
        create_channel(pool_ref(pool)?, id, slot_count, payload_bytes)?;
        Ok(())
    })
}

/// Serves echo requests on channel `id` until `duration_ms` elapses.
/// Blocks the calling thread.
///
/// # Safety
/// `pool` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pkv_rpc_serve_echo(
    pool: *const PkvPool,
    id: u32,
    duration_ms: u64,
) -> PkvStatus {
    guard(|| {
        let mut server = RpcServer::attach(Arc::clone(pool_ref(pool)?), id)?;
        let deadline = Instant::now() + Duration::from_millis(duration_ms);
        let mut handler = echo;
        while Instant::now() < deadline {
            if server.poll_once(&mut handler)? == 0 {
                std::thread::yield_now();
            }
        }
        Ok(())
    })
}

/// Attaches an RPC client to channel `id`.
///
/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_rpc_client_new(pool: *const PkvPool, id: u32, out: *mut *mut PkvRpcClient) -> PkvStatus {
    guard(|| {
        let pool = pool_ref(pool)?;
        non_null(out, "out")?;
        let client = RpcClient::attach(Arc::clone(pool), id)?;
        *out = Box::into_raw(Box::new(PkvRpcClient { inner: client }));
        Ok(())
    })
}

/// Releases an RPC client. Null is ignored.
///
/// # Safety
/// `client` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pkv_rpc_client_free(client: *mut PkvRpcClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

/// Sends one request and waits for its response. `resp_len` receives the
/// response length; when it exceeds `resp_cap` the call fails with
/// `BufferTooSmall` and nothing is copied.
///
/// # Safety
/// `client` must be a live handle, `req` must hold `req_len` bytes, `resp`
/// must hold `resp_cap` writable bytes and `resp_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pkv_rpc_call(
    client: *mut PkvRpcClient,
    req: *const u8,
    req_len: usize,
    resp: *mut u8,
    resp_cap: usize,
    resp_len: *mut usize,
) -> PkvStatus {
    guard(|| {
        non_null(client, "client")?;
        non_null(resp_len, "resp_len")?;
        let reply = (*client).inner.call(bytes_in(req, req_len, "req")?)?;
        *resp_len = reply.len();
        if reply.len() > resp_cap {
            return Err(Failure::new(
                PkvStatus::BufferTooSmall,
                format!("response of {} bytes exceeds buffer of {resp_cap}", reply.len()),
            ));
        }
        bytes_out(resp, reply.len(), "resp")?.copy_from_slice(&reply);
        Ok(())
    })
}
