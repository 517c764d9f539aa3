//! Shared-memory RPC over the pool.
//!
//! A channel is a contiguous pool range holding a 64-byte channel header and
//! `slot_count` slots. Each slot is laid out as
//!
//! ```text
//! +0    status line  [status u64][req_len u32][resp_len u32][resp_code u32][pad]
//! +64   seq line     [seq u64][pad]
//! +128  request      payload_bytes rounded up to 64
//! +..   response     payload_bytes rounded up to 64
//! ```
//!
//! Status cycles EMPTY -> REQ_READY -> PROCESSING -> RESP_READY -> EMPTY.
//! The seq word arbitrates ownership between clients: even means free, odd
//! means claimed by a client; it grows by two per use of the slot.
//!
//! Clients write payloads with cache-bypassing stores and publish with a
//! release CAS on the status word. The server reads flags and payloads with
//! fresh reads, publishes responses in batches behind a single fence, and
//! never blocks in the kernel.

pub mod tcp;

use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{fence, AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{CoherenceError, CoherentSession, SessionMode};
use crate::pool::{ChannelRecord, Pool, PoolError, LINE_BYTES};
use crate::stats::LatencyHistogram;

pub const EMPTY: u64 = 0;
pub const REQ_READY: u64 = 1;
pub const PROCESSING: u64 = 2;
pub const RESP_READY: u64 = 3;

pub const DEFAULT_SLOTS: u32 = 128;
pub const DEFAULT_PAYLOAD: u32 = 64;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

pub const CODE_OK: u32 = 0;
pub const CODE_HANDLER_PANIC: u32 = 1;
pub const CODE_BAD_REQUEST: u32 = 2;

const SEQ_ABANDONED: u64 = 1 << 63;
const SEQ_RECLAIMING: u64 = 1 << 62;
const SEQ_MASK: u64 = !(SEQ_ABANDONED | SEQ_RECLAIMING);

const CHANNEL_MAGIC: u64 = u64::from_le_bytes(*b"RPCCHAN1");
const CHANNEL_LIVE: u32 = 1;
const CHANNEL_CLOSED: u32 = 2;

#[derive(Debug, Error)]
pub enum RpcError {
    #[error(transparent)]
    Coherence(#[from] CoherenceError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("invalid channel geometry: {0}")]
    InvalidGeometry(String),
    #[error("insufficient reserved space for channel: {0}")]
    NoSpace(PoolError),
    #[error("channel {0} not found")]
    NoSuchChannel(u32),
    #[error("request of {len} bytes exceeds payload size {max}")]
    TooLarge { len: usize, max: usize },
    #[error("call timed out after {0:?}")]
    Timeout(Duration),
    #[error("no free slot within {0:?}")]
    ChannelFull(Duration),
    #[error("server returned error code {0}")]
    Remote(u32),
    #[error("slot {slot}: unexpected status {found} (expected {expected})")]
    InvalidTransition { slot: u32, expected: u64, found: u64 },
}

pub type RpcResult<T> = Result<T, RpcError>;

fn round_line(n: u64) -> u64 {
    n.div_ceil(LINE_BYTES) * LINE_BYTES
}

/// Byte geometry of a channel inside the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelGeometry {
    pub id: u32,
    pub base: u64,
    pub slot_count: u32,
    pub payload_bytes: u32,
}

impl ChannelGeometry {
    pub fn slot_bytes(&self) -> u64 {
        2 * LINE_BYTES + 2 * round_line(self.payload_bytes as u64)
    }

    pub fn region_bytes(&self) -> u64 {
        LINE_BYTES + self.slot_count as u64 * self.slot_bytes()
    }

    fn slot_base(&self, slot: u32) -> u64 {
        self.base + LINE_BYTES + slot as u64 * self.slot_bytes()
    }

    pub fn status_off(&self, slot: u32) -> u64 {
        self.slot_base(slot)
    }

    pub fn seq_off(&self, slot: u32) -> u64 {
        self.slot_base(slot) + LINE_BYTES
    }

    pub fn request_off(&self, slot: u32) -> u64 {
        self.slot_base(slot) + 2 * LINE_BYTES
    }

    pub fn response_off(&self, slot: u32) -> u64 {
        self.request_off(slot) + round_line(self.payload_bytes as u64)
    }
}

/// Reserves pool space for a channel, formats it and records it in the
/// pool directory so other processes can attach by id.
pub fn create_channel(pool: &Pool, id: u32, slot_count: u32, payload_bytes: u32) -> RpcResult<ChannelGeometry> {
    if slot_count == 0 {
        return Err(RpcError::InvalidGeometry("slot_count must be > 0".into()));
    }
    if payload_bytes == 0 {
        return Err(RpcError::InvalidGeometry("payload_bytes must be > 0".into()));
    }
    let mut geo = ChannelGeometry { id, base: 0, slot_count, payload_bytes };
    let region = pool.alloc_contiguous(geo.region_bytes()).map_err(RpcError::NoSpace)?;
    geo.base = region.offset;
    // fresh allocation: every slot EMPTY, every seq 0
    pool.write(region.offset, &vec![0u8; geo.region_bytes() as usize])?;
    let mut hdr = [0u8; LINE_BYTES as usize];
    hdr[0..8].copy_from_slice(&CHANNEL_MAGIC.to_le_bytes());
    hdr[8..12].copy_from_slice(&slot_count.to_le_bytes());
    hdr[12..16].copy_from_slice(&payload_bytes.to_le_bytes());
    hdr[16..20].copy_from_slice(&(geo.slot_bytes() as u32).to_le_bytes());
    hdr[20..24].copy_from_slice(&CHANNEL_LIVE.to_le_bytes());
    pool.write(region.offset, &hdr)?;
    fence(Ordering::SeqCst);
    let rec = ChannelRecord { id, slot_count, payload_bytes, region };
    if let Err(e) = pool.register_channel(rec) {
        pool.free_block(region)?;
        return Err(e.into());
    }
    Ok(geo)
}

/// Looks a channel up in the pool directory and validates its header.
pub fn attach_channel(pool: &Pool, id: u32) -> RpcResult<ChannelGeometry> {
    let rec = pool.find_channel(id).ok_or(RpcError::NoSuchChannel(id))?;
    let geo = ChannelGeometry { id, base: rec.region.offset, slot_count: rec.slot_count, payload_bytes: rec.payload_bytes };
    let hdr = pool.read_vec(geo.base, LINE_BYTES)?;
    let magic = u64::from_le_bytes(hdr[0..8].try_into().unwrap());
    let slots = u32::from_le_bytes(hdr[8..12].try_into().unwrap());
    let payload = u32::from_le_bytes(hdr[12..16].try_into().unwrap());
    if magic != CHANNEL_MAGIC || slots != rec.slot_count || payload != rec.payload_bytes {
        return Err(RpcError::InvalidGeometry(format!("channel {id} header does not match directory")));
    }
    Ok(geo)
}

/// Marks a channel closed, removes it from the directory and frees its range.
pub fn destroy_channel(pool: &Pool, id: u32) -> RpcResult<()> {
    let rec = pool.unregister_channel(id).ok_or(RpcError::NoSuchChannel(id))?;
    pool.write(rec.region.offset + 20, &CHANNEL_CLOSED.to_le_bytes())?;
    pool.free_block(rec.region)?;
    Ok(())
}

/// Wait-loop policy: spin briefly, then yield. On a single CPU spinning only
/// delays the peer, so the spin budget drops to zero.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    spin_limit: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self { spin_limit: if cpus > 1 { 128 } else { 0 } }
    }
}

impl Backoff {
    #[inline]
    pub fn wait(&self, iteration: u32) {
        if iteration < self.spin_limit {
            std::hint::spin_loop();
        } else {
            std::thread::yield_now();
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClientStats {
    pub calls: u64,
    pub ok: u64,
    pub timeouts: u64,
    pub remote_errors: u64,
    pub claim_retries: u64,
    pub latency: LatencyHistogram,
}

/// A submitted request that has not been collected yet.
#[derive(Debug, Clone, Copy)]
pub struct Pending {
    pub slot: u32,
    seq: u64,
    started: Instant,
}

impl Pending {
    pub fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }
}

pub struct RpcClient {
    session: CoherentSession,
    geo: ChannelGeometry,
    timeout: Duration,
    cursor: u32,
    backoff: Backoff,
    stats: ClientStats,
}

impl RpcClient {
    pub fn attach(pool: Arc<Pool>, channel: u32) -> RpcResult<Self> {
        let geo = attach_channel(&pool, channel)?;
        Ok(Self::new(CoherentSession::new(pool), geo))
    }

    pub fn new(session: CoherentSession, geo: ChannelGeometry) -> Self {
        // spread clients over the slot array
        let cursor = rand::random::<u32>() % geo.slot_count;
        Self { session, geo, timeout: DEFAULT_TIMEOUT, cursor, backoff: Backoff::default(), stats: ClientStats::default() }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn geometry(&self) -> ChannelGeometry {
        self.geo
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    pub fn session_mut(&mut self) -> &mut CoherentSession {
        &mut self.session
    }

    fn try_claim(&mut self) -> RpcResult<Option<(u32, u64)>> {
        for _ in 0..self.geo.slot_count {
            let slot = self.cursor;
            self.cursor = (self.cursor + 1) % self.geo.slot_count;
            let off = self.geo.seq_off(slot);
            let seq = self.session.load_flag_fresh(off)?;
            if seq & 1 == 0 && seq & !SEQ_MASK == 0 && self.session.cas_flag(off, seq, seq + 1)?.is_ok() {
                return Ok(Some((slot, seq + 1)));
            }
        }
        Ok(None)
    }

    /// Claims a free slot, writes the request and publishes REQ_READY.
    pub fn submit(&mut self, request: &[u8]) -> RpcResult<Pending> {
        if request.len() > self.geo.payload_bytes as usize {
            return Err(RpcError::TooLarge { len: request.len(), max: self.geo.payload_bytes as usize });
        }
        let started = Instant::now();
        let mut it = 0u32;
        let (slot, seq) = loop {
            if let Some(claim) = self.try_claim()? {
                break claim;
            }
            self.stats.claim_retries += 1;
            if started.elapsed() > self.timeout {
                self.stats.calls += 1;
                self.stats.timeouts += 1;
                return Err(RpcError::ChannelFull(self.timeout));
            }
            self.backoff.wait(it);
            it = it.saturating_add(1);
        };
        self.session.bypass_write(self.geo.request_off(slot), request)?;
        self.session
            .bypass_write(self.geo.status_off(slot) + 8, &(request.len() as u32).to_le_bytes())?;
        let st = self.geo.status_off(slot);
        if let Err(found) = self.session.cas_flag(st, EMPTY, REQ_READY)? {
            debug_assert!(false, "slot {slot} claimed while status {found}");
            return Err(RpcError::InvalidTransition { slot, expected: EMPTY, found });
        }
        self.stats.calls += 1;
        Ok(Pending { slot, seq, started })
    }

    /// Collects the response if it is ready. `Ok(None)` means still pending.
    pub fn try_complete(&mut self, p: &Pending) -> RpcResult<Option<Vec<u8>>> {
        let st = self.geo.status_off(p.slot);
        if self.session.load_flag_fresh(st)? != RESP_READY {
            return Ok(None);
        }
        let mut meta = [0u8; 8];
        self.session.read_fresh(st + 12, &mut meta)?;
        let resp_len = u32::from_le_bytes(meta[0..4].try_into().unwrap()).min(self.geo.payload_bytes) as usize;
        let code = u32::from_le_bytes(meta[4..8].try_into().unwrap());
        let resp = self.session.read_fresh_vec(self.geo.response_off(p.slot), resp_len)?;
        if let Err(found) = self.session.cas_flag(st, RESP_READY, EMPTY)? {
            return Err(RpcError::InvalidTransition { slot: p.slot, expected: RESP_READY, found });
        }
        self.session.store_flag(self.geo.seq_off(p.slot), p.seq + 1)?;
        self.stats.latency.record(p.started.elapsed());
        if code != CODE_OK {
            self.stats.remote_errors += 1;
            return Err(RpcError::Remote(code));
        }
        self.stats.ok += 1;
        Ok(Some(resp))
    }

    /// Gives up on a request. Whoever observes both the abandonment and the
    /// server's RESP_READY first returns the slot to the free pool.
    pub fn abandon(&mut self, p: &Pending) -> RpcResult<()> {
        self.stats.timeouts += 1;
        let seq_off = self.geo.seq_off(p.slot);
        if self.session.cas_flag(seq_off, p.seq, p.seq | SEQ_ABANDONED)?.is_err() {
            return Ok(());
        }
        fence(Ordering::SeqCst);
        if self.session.load_flag_fresh(self.geo.status_off(p.slot))? == RESP_READY {
            reclaim(&mut self.session, &self.geo, p.slot, p.seq | SEQ_ABANDONED)?;
        }
        Ok(())
    }

    /// Waits for a pending request, abandoning it after the client timeout.
    pub fn wait(&mut self, p: Pending) -> RpcResult<Vec<u8>> {
        let mut it = 0u32;
        loop {
            if let Some(resp) = self.try_complete(&p)? {
                return Ok(resp);
            }
            if p.started.elapsed() > self.timeout {
                self.abandon(&p)?;
                return Err(RpcError::Timeout(self.timeout));
            }
            self.backoff.wait(it);
            it = it.saturating_add(1);
        }
    }

    pub fn call(&mut self, request: &[u8]) -> RpcResult<Vec<u8>> {
        let p = self.submit(request)?;
        self.wait(p)
    }
}

fn reclaim(session: &mut CoherentSession, geo: &ChannelGeometry, slot: u32, abandoned: u64) -> RpcResult<bool> {
    let seq_off = geo.seq_off(slot);
    if session.cas_flag(seq_off, abandoned, abandoned | SEQ_RECLAIMING)?.is_err() {
        return Ok(false);
    }
    session.cas_flag(geo.status_off(slot), RESP_READY, EMPTY)?.ok();
    session.store_flag(seq_off, (abandoned & SEQ_MASK) + 1)?;
    Ok(true)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ServerStats {
    pub handled: u64,
    pub sweeps: u64,
    pub fence_batches: u64,
    pub panics: u64,
    pub bad_requests: u64,
    pub reclaimed: u64,
    pub invalid_transitions: u64,
}

/// Polling server owning a contiguous range of slots.
pub struct RpcServer {
    session: CoherentSession,
    geo: ChannelGeometry,
    slots: Range<u32>,
    req_buf: Vec<u8>,
    resp_buf: Vec<u8>,
    batch: Vec<u32>,
    backoff: Backoff,
    stats: ServerStats,
}

impl RpcServer {
    pub fn attach(pool: Arc<Pool>, channel: u32) -> RpcResult<Self> {
        let geo = attach_channel(&pool, channel)?;
        Ok(Self::new(CoherentSession::new(pool), geo))
    }

    pub fn attach_with_mode(pool: Arc<Pool>, channel: u32, mode: SessionMode) -> RpcResult<Self> {
        let geo = attach_channel(&pool, channel)?;
        let session = CoherentSession::with_cache(pool, crate::coherence::DEFAULT_CACHE_LINES, mode);
        Ok(Self::new(session, geo))
    }

    pub fn new(session: CoherentSession, geo: ChannelGeometry) -> Self {
        Self::for_slots(session, geo, 0..geo.slot_count)
    }

    /// A poller restricted to `slots`. Pollers sharing a channel must own
    /// disjoint ranges.
    pub fn for_slots(session: CoherentSession, geo: ChannelGeometry, slots: Range<u32>) -> Self {
        let p = geo.payload_bytes as usize;
        Self {
            session,
            geo,
            slots,
            req_buf: vec![0; p],
            resp_buf: vec![0; p],
            batch: Vec::with_capacity(geo.slot_count as usize),
            backoff: Backoff::default(),
            stats: ServerStats::default(),
        }
    }

    /// Splits a channel into `shards` pollers over disjoint slot ranges.
    pub fn sharded(pool: Arc<Pool>, channel: u32, shards: u32) -> RpcResult<Vec<RpcServer>> {
        let geo = attach_channel(&pool, channel)?;
        let shards = shards.clamp(1, geo.slot_count);
        let per = geo.slot_count / shards;
        Ok((0..shards)
            .map(|i| {
                let end = if i + 1 == shards { geo.slot_count } else { (i + 1) * per };
                RpcServer::for_slots(CoherentSession::new(pool.clone()), geo, i * per..end)
            })
            .collect())
    }

    pub fn stats(&self) -> &ServerStats {
        &self.stats
    }

    pub fn geometry(&self) -> ChannelGeometry {
        self.geo
    }

    /// One sweep over the owned slots. Returns the number of requests handled.
    pub fn poll_once<F>(&mut self, handler: &mut F) -> RpcResult<usize>
    where
        F: FnMut(&[u8], &mut [u8]) -> usize,
    {
        self.stats.sweeps += 1;
        self.batch.clear();
        for slot in self.slots.clone() {
            let st = self.geo.status_off(slot);
            if self.session.load_flag_fresh(st)? != REQ_READY {
                continue;
            }
            if let Err(found) = self.session.cas_flag(st, REQ_READY, PROCESSING)? {
                self.stats.invalid_transitions += 1;
                debug_assert!(false, "slot {slot}: REQ_READY vanished (now {found})");
                continue;
            }
            let mut len_bytes = [0u8; 4];
            self.session.read_fresh(st + 8, &mut len_bytes)?;
            let req_len = u32::from_le_bytes(len_bytes) as usize;
            let (resp_len, code) = if req_len > self.req_buf.len() {
                self.stats.bad_requests += 1;
                (0, CODE_BAD_REQUEST)
            } else {
                self.session.read_fresh(self.geo.request_off(slot), &mut self.req_buf[..req_len])?;
                let req = &self.req_buf[..req_len];
                let resp = &mut self.resp_buf;
                match catch_unwind(AssertUnwindSafe(|| handler(req, resp))) {
                    Ok(n) => (n.min(self.resp_buf.len()), CODE_OK),
                    Err(_) => {
                        self.stats.panics += 1;
                        (0, CODE_HANDLER_PANIC)
                    }
                }
            };
            self.session.bypass_write(self.geo.response_off(slot), &self.resp_buf[..resp_len])?;
            let mut meta = [0u8; 8];
            meta[0..4].copy_from_slice(&(resp_len as u32).to_le_bytes());
            meta[4..8].copy_from_slice(&code.to_le_bytes());
            self.session.bypass_write(st + 12, &meta)?;
            self.batch.push(slot);
        }
        if self.batch.is_empty() {
            return Ok(0);
        }
        // one fence orders every response payload before any RESP_READY
        fence(Ordering::SeqCst);
        self.stats.fence_batches += 1;
        for i in 0..self.batch.len() {
            let slot = self.batch[i];
            if let Err(found) = self.session.cas_flag(self.geo.status_off(slot), PROCESSING, RESP_READY)? {
                self.stats.invalid_transitions += 1;
                debug_assert!(false, "slot {slot}: PROCESSING vanished (now {found})");
            }
        }
        fence(Ordering::SeqCst);
        for i in 0..self.batch.len() {
            let slot = self.batch[i];
            let seq = self.session.load_flag_fresh(self.geo.seq_off(slot))?;
            if seq & SEQ_ABANDONED != 0 && seq & SEQ_RECLAIMING == 0 && reclaim(&mut self.session, &self.geo, slot, seq)? {
                self.stats.reclaimed += 1;
            }
        }
        self.stats.handled += self.batch.len() as u64;
        Ok(self.batch.len())
    }

    /// Polls until `stop` is set.
    pub fn serve<F>(&mut self, handler: &mut F, stop: &AtomicBool) -> RpcResult<()>
    where
        F: FnMut(&[u8], &mut [u8]) -> usize,
    {
        let mut idle = 0u32;
        while !stop.load(Ordering::Relaxed) {
            if self.poll_once(handler)? > 0 {
                idle = 0;
            } else {
                self.backoff.wait(idle);
                idle = idle.saturating_add(1);
            }
        }
        Ok(())
    }
}

/// Handler that copies the request into the response.
pub fn echo(req: &[u8], resp: &mut [u8]) -> usize {
    resp[..req.len()].copy_from_slice(req);
    req.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{PoolConfig, MIB};
    use std::thread;

    fn pool() -> Arc<Pool> {
        Arc::new(Pool::create_in_memory(PoolConfig::new("", 4 * MIB, 1, 4096).with_chunk(MIB)).unwrap())
    }

    fn client(p: &Arc<Pool>, id: u32) -> RpcClient {
        RpcClient::attach(p.clone(), id).unwrap().with_timeout(Duration::from_millis(300))
    }

    #[test]
    fn geometry_is_line_aligned() {
        let g = ChannelGeometry { id: 0, base: 4096, slot_count: 128, payload_bytes: 64 };
        assert_eq!(g.slot_bytes(), 256);
        for s in [0, 1, 127] {
            for off in [g.status_off(s), g.seq_off(s), g.request_off(s), g.response_off(s)] {
                assert_eq!(off % 64, 0);
            }
        }
        let g = ChannelGeometry { payload_bytes: 100, ..g };
        assert_eq!(g.response_off(0) - g.request_off(0), 128);
    }

    #[test]
    fn create_rejects_bad_geometry() {
        let p = pool();
        assert!(matches!(create_channel(&p, 0, 0, 64), Err(RpcError::InvalidGeometry(_))));
        assert!(matches!(create_channel(&p, 0, 1 << 20, 64), Err(RpcError::NoSpace(_))));
        assert!(matches!(attach_channel(&p, 9), Err(RpcError::NoSuchChannel(9))));
    }

    #[test]
    fn fresh_channel_is_all_empty() {
        let p = pool();
        let g = create_channel(&p, 3, 128, 64).unwrap();
        let g2 = attach_channel(&p, 3).unwrap();
        assert_eq!(g, g2);
        for s in 0..128 {
            assert_eq!(p.word(g.status_off(s)).unwrap().load(Ordering::Relaxed), EMPTY);
        }
    }

    #[test]
    fn poll_counts_and_fence_batching() {
        let p = pool();
        create_channel(&p, 0, 128, 64).unwrap();
        let mut server = RpcServer::attach(p.clone(), 0).unwrap();
        let mut h = echo;
        assert_eq!(server.poll_once(&mut h).unwrap(), 0);
        assert_eq!(server.stats().fence_batches, 0);

        let mut c = client(&p, 0);
        let pend = c.submit(b"one").unwrap();
        assert_eq!(server.poll_once(&mut h).unwrap(), 1);
        assert_eq!(c.try_complete(&pend).unwrap().unwrap(), b"one");

        let pending: Vec<_> = (0..128u32).map(|i| c.submit(&i.to_le_bytes()).unwrap()).collect();
        assert!(matches!(c.submit(b"x"), Err(RpcError::ChannelFull(_))));
        let before = server.stats().fence_batches;
        assert_eq!(server.poll_once(&mut h).unwrap(), 128);
        assert_eq!(server.stats().fence_batches, before + 1);
        for (i, pd) in pending.iter().enumerate() {
            assert_eq!(c.try_complete(pd).unwrap().unwrap(), (i as u32).to_le_bytes());
        }
    }

    #[test]
    fn seq_increases_across_reuse() {
        let p = pool();
        let g = create_channel(&p, 0, 1, 64).unwrap();
        let mut server = RpcServer::attach(p.clone(), 0).unwrap();
        let mut c = client(&p, 0);
        let mut last = 0;
        for _ in 0..5 {
            let pd = c.submit(b"a").unwrap();
            assert!(pd.seq > last);
            last = pd.seq;
            server.poll_once(&mut echo).unwrap();
            c.try_complete(&pd).unwrap().unwrap();
        }
        assert_eq!(p.word(g.seq_off(0)).unwrap().load(Ordering::Relaxed), 10);
    }

    #[test]
    fn echo_across_threads() {
        let p = pool();
        create_channel(&p, 0, 16, 64).unwrap();
        let stop = Arc::new(AtomicBool::new(false));
        let srv = {
            let (p, stop) = (p.clone(), stop.clone());
            thread::spawn(move || {
                let mut s = RpcServer::attach(p, 0).unwrap();
                s.serve(&mut echo, &stop).unwrap();
                s.stats().clone()
            })
        };
        let mut c = client(&p, 0).with_timeout(Duration::from_secs(10));
        for i in 0..2000u64 {
            let mut req = [0u8; 64];
            req[..8].copy_from_slice(&i.to_le_bytes());
            req[63] = i as u8;
            assert_eq!(c.call(&req).unwrap(), req);
        }
        stop.store(true, Ordering::Relaxed);
        let st = srv.join().unwrap();
        assert_eq!(st.handled, 2000);
        assert_eq!(c.stats().ok, 2000);
        assert_eq!(c.stats().latency.count(), 2000);
    }

    #[test]
    fn handler_panic_is_isolated() {
        let p = pool();
        create_channel(&p, 0, 4, 64).unwrap();
        let mut server = RpcServer::attach(p.clone(), 0).unwrap();
        let mut c = client(&p, 0);
        let bad = c.submit(b"boom").unwrap();
        let good = c.submit(b"fine").unwrap();
        let mut h = |req: &[u8], resp: &mut [u8]| {
            if req == b"boom" {
                panic!("handler failure");
            }
            echo(req, resp)
        };
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let handled = server.poll_once(&mut h);
        std::panic::set_hook(prev);
        assert_eq!(handled.unwrap(), 2);
        assert!(matches!(c.try_complete(&bad), Err(RpcError::Remote(CODE_HANDLER_PANIC))));
        assert_eq!(c.try_complete(&good).unwrap().unwrap(), b"fine");
        assert_eq!(server.stats().panics, 1);
    }

    #[test]
    fn timeout_without_server_and_late_reclaim() {
        let p = pool();
        create_channel(&p, 0, 1, 64).unwrap();
        let mut c = client(&p, 0).with_timeout(Duration::from_millis(20));
        assert!(matches!(c.call(b"lost"), Err(RpcError::Timeout(_))));
        // slot is held until the late server finishes and reclaims it
        assert!(matches!(c.call(b"next"), Err(RpcError::ChannelFull(_))));
        let mut server = RpcServer::attach(p.clone(), 0).unwrap();
        assert_eq!(server.poll_once(&mut echo).unwrap(), 1);
        assert_eq!(server.stats().reclaimed, 1);
        let pd = c.submit(b"again").unwrap();
        server.poll_once(&mut echo).unwrap();
        assert_eq!(c.try_complete(&pd).unwrap().unwrap(), b"again");
    }

    #[test]
    fn client_reclaims_when_response_already_posted() {
        let p = pool();
        create_channel(&p, 0, 1, 64).unwrap();
        let mut server = RpcServer::attach(p.clone(), 0).unwrap();
        let mut c = client(&p, 0);
        let pd = c.submit(b"x").unwrap();
        server.poll_once(&mut echo).unwrap();
        c.abandon(&pd).unwrap();
        let pd2 = c.submit(b"y").unwrap();
        assert!(pd2.seq > pd.seq);
    }

    #[test]
    fn oversized_request_rejected() {
        let p = pool();
        create_channel(&p, 0, 1, 64).unwrap();
        let mut c = client(&p, 0);
        assert!(matches!(c.submit(&[0; 65]), Err(RpcError::TooLarge { len: 65, max: 64 })));
    }

    #[test]
    fn broken_read_fresh_starves_server() {
        let p = pool();
        create_channel(&p, 0, 8, 64).unwrap();
        let mode = SessionMode { break_read_fresh: true, ..Default::default() };
        let mut server = RpcServer::attach_with_mode(p.clone(), 0, mode).unwrap();
        server.poll_once(&mut echo).unwrap(); // caches every status line as EMPTY
        let mut c = client(&p, 0);
        let pd = c.submit(b"ping").unwrap();
        for _ in 0..10 {
            assert_eq!(server.poll_once(&mut echo).unwrap(), 0);
        }
        assert!(c.try_complete(&pd).unwrap().is_none());
    }

    #[test]
    fn sharded_pollers_cover_disjoint_ranges() {
        let p = pool();
        create_channel(&p, 0, 10, 64).unwrap();
        let mut shards = RpcServer::sharded(p.clone(), 0, 3).unwrap();
        let ranges: Vec<_> = shards.iter().map(|s| s.slots.clone()).collect();
        assert_eq!(ranges, vec![0..3, 3..6, 6..10]);
        let mut c = client(&p, 0);
        let pend: Vec<_> = (0..10u8).map(|i| c.submit(&[i]).unwrap()).collect();
        let total: usize = shards.iter_mut().map(|s| s.poll_once(&mut echo).unwrap()).sum();
        assert_eq!(total, 10);
        for (i, pd) in pend.iter().enumerate() {
            assert_eq!(c.try_complete(pd).unwrap().unwrap(), vec![i as u8]);
        }
    }

    #[test]
    fn destroyed_channel_cannot_be_attached() {
        let p = pool();
        create_channel(&p, 1, 4, 64).unwrap();
        let before = p.free_bytes();
        destroy_channel(&p, 1).unwrap();
        assert!(p.free_bytes() > before);
        assert!(matches!(attach_channel(&p, 1), Err(RpcError::NoSuchChannel(1))));
    }
}
