//! Software coherence over a non-coherent shared pool.
//!
//! Every emulated host owns a [`CoherentSession`] holding an explicit
//! write-back, write-allocate LRU cache of 64-byte lines. Nothing in the cache
//! is visible to other hosts until it is written back, so the stale-read
//! hazards of a non-coherent multi-host pool show up deterministically.
//!
//! Mapping to real hardware:
//!
//! | operation                 | hardware analog                     |
//! |---------------------------|-------------------------------------|
//! | `bypass_write`            | non-temporal store / DSA bypass     |
//! | `flush`, `invalidate`     | CLFLUSH (write back + invalidate)   |
//! | `read_fresh`              | CLFLUSH then load                   |
//! | `set_region_uncacheable`  | MTRR uncacheable range              |
//! | `device_write` w/o DDIO   | device DMA straight to memory       |
//! | `device_read`             | device DMA from memory              |
//!
//! There is deliberately no write-back-without-invalidate read path: a
//! CLWB-style writeback leaves the stale line resident and does not make a
//! subsequent load fresh.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::pool::{Pool, PoolError, LINE_BYTES};

pub mod schedule;

pub const DEFAULT_CACHE_LINES: usize = 1024;
const LINE: usize = LINE_BYTES as usize;
const NIL: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum CoherenceError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("empty range")]
    EmptyRange,
}

pub type CoherenceResult<T> = Result<T, CoherenceError>;

#[inline]
fn line_of(offset: u64) -> u64 {
    offset & !(LINE_BYTES - 1)
}

struct Line {
    offset: u64,
    data: [u8; LINE],
    dirty: bool,
    prev: u32,
    next: u32,
}

/// Simulated private cache of one host.
pub struct HostCache {
    capacity: usize,
    index: FxHashMap<u64, u32>,
    slots: Vec<Line>,
    free: Vec<u32>,
    // most recently used at head
    head: u32,
    tail: u32,
    uncacheable: Vec<(u64, u64)>,
    writebacks: u64,
}

impl HostCache {
    pub fn new(capacity_lines: usize) -> Self {
        assert!(capacity_lines > 0, "cache needs at least one line");
        Self {
            capacity: capacity_lines,
            index: FxHashMap::default(),
            slots: Vec::with_capacity(capacity_lines),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
            uncacheable: Vec::new(),
            writebacks: 0,
        }
    }

    pub fn capacity_lines(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, offset: u64) -> bool {
        self.index.contains_key(&line_of(offset))
    }

    pub fn is_dirty(&self, offset: u64) -> bool {
        self.index.get(&line_of(offset)).is_some_and(|&i| self.slots[i as usize].dirty)
    }

    /// Number of dirty lines written back to the pool so far.
    pub fn writebacks(&self) -> u64 {
        self.writebacks
    }

    pub fn is_uncacheable(&self, line: u64) -> bool {
        self.uncacheable.iter().any(|&(a, b)| line >= a && line < b)
    }

    /// Cached line offsets, ascending.
    pub fn lines(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.index.keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// Text dump, one line per cached line: `offset dirty|clean hex-prefix`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for off in self.lines() {
            let l = &self.slots[self.index[&off] as usize];
            let hex: String = l.data[..8].iter().map(|b| format!("{b:02x}")).collect();
            out.push_str(&format!("{off:#010x} {} {hex}\n", if l.dirty { "dirty" } else { "clean" }));
        }
        out
    }

    fn unlink(&mut self, i: u32) {
        let (prev, next) = {
            let l = &self.slots[i as usize];
            (l.prev, l.next)
        };
        if prev != NIL {
            self.slots[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.slots[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, i: u32) {
        self.slots[i as usize].prev = NIL;
        self.slots[i as usize].next = self.head;
        if self.head != NIL {
            self.slots[self.head as usize].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn touch(&mut self, i: u32) {
        if self.head != i {
            self.unlink(i);
            self.push_front(i);
        }
    }

    /// Removes a line, writing it back first when dirty.
    fn drop_line(&mut self, pool: &Pool, line: u64) -> CoherenceResult<()> {
        if let Some(i) = self.index.remove(&line) {
            self.unlink(i);
            let l = &self.slots[i as usize];
            if l.dirty {
                pool.write(l.offset, &l.data)?;
                self.writebacks += 1;
            }
            self.free.push(i);
        }
        Ok(())
    }

    /// Same end state as `drop_line` followed by `fill`: the line is written
    /// back if dirty, reloaded from the pool, clean and most recently used.
    fn refresh(&mut self, pool: &Pool, line: u64) -> CoherenceResult<u32> {
        let Some(&i) = self.index.get(&line) else {
            return self.fill(pool, line);
        };
        let l = &mut self.slots[i as usize];
        if l.dirty {
            pool.write(l.offset, &l.data)?;
            l.dirty = false;
            self.writebacks += 1;
        }
        pool.read(line, &mut l.data)?;
        self.touch(i);
        Ok(i)
    }

    /// Returns the slot holding `line`, filling it from the pool on a miss and
    /// evicting the LRU line when full.
    fn fill(&mut self, pool: &Pool, line: u64) -> CoherenceResult<u32> {
        if let Some(&i) = self.index.get(&line) {
            self.touch(i);
            return Ok(i);
        }
        if self.index.len() >= self.capacity {
            let victim = self.slots[self.tail as usize].offset;
            self.drop_line(pool, victim)?;
        }
        let mut data = [0u8; LINE];
        pool.read(line, &mut data)?;
        let slot = Line { offset: line, data, dirty: false, prev: NIL, next: NIL };
        let i = match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = slot;
                i
            }
            None => {
                self.slots.push(slot);
                (self.slots.len() - 1) as u32
            }
        };
        self.index.insert(line, i);
        self.push_front(i);
        Ok(i)
    }

    fn discard(&mut self, line: u64) {
        if let Some(i) = self.index.remove(&line) {
            self.unlink(i);
            self.free.push(i);
        }
    }
}

/// Per-session behaviour switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionMode {
    /// Device-path writes skip the cache (DDIO off). When false they land in
    /// the host cache like ordinary stores.
    pub ddio_disabled: bool,
    /// Mutation switch for testing: `read_fresh` degrades to a plain cached read.
    pub break_read_fresh: bool,
}

impl Default for SessionMode {
    fn default() -> Self {
        Self { ddio_disabled: true, break_read_fresh: false }
    }
}

/// One emulated host's view of the pool. Single-threaded.
pub struct CoherentSession {
    pool: Arc<Pool>,
    cache: HostCache,
    mode: SessionMode,
}

impl CoherentSession {
    pub fn new(pool: Arc<Pool>) -> Self {
        Self::with_cache(pool, DEFAULT_CACHE_LINES, SessionMode::default())
    }

    pub fn with_cache(pool: Arc<Pool>, capacity_lines: usize, mode: SessionMode) -> Self {
        Self { pool, cache: HostCache::new(capacity_lines), mode }
    }

    pub fn pool(&self) -> &Arc<Pool> {
        &self.pool
    }

    pub fn cache(&self) -> &HostCache {
        &self.cache
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SessionMode) {
        self.mode = mode;
    }

    fn check(&self, offset: u64, len: usize) -> CoherenceResult<()> {
        let pool_bytes = self.pool.config().pool_bytes;
        match offset.checked_add(len as u64) {
            Some(end) if end <= pool_bytes => Ok(()),
            _ => Err(PoolError::OutOfRange { offset, len: len as u64, pool_bytes }.into()),
        }
    }

    fn lines(offset: u64, len: u64) -> impl Iterator<Item = u64> {
        let first = line_of(offset);
        let end = if len == 0 { first } else { offset + len };
        (first..end).step_by(LINE)
    }

    /// Ordinary store: lands in this host's cache only.
    pub fn cached_write(&mut self, offset: u64, bytes: &[u8]) -> CoherenceResult<()> {
        self.check(offset, bytes.len())?;
        let mut pos = 0usize;
        while pos < bytes.len() {
            let addr = offset + pos as u64;
            let line = line_of(addr);
            let in_line = (addr - line) as usize;
            let n = (LINE - in_line).min(bytes.len() - pos);
            if self.cache.is_uncacheable(line) {
                self.pool.write(addr, &bytes[pos..pos + n])?;
            } else {
                let i = self.cache.fill(&self.pool, line)? as usize;
                let l = &mut self.cache.slots[i];
                l.data[in_line..in_line + n].copy_from_slice(&bytes[pos..pos + n]);
                l.dirty = true;
            }
            pos += n;
        }
        Ok(())
    }

    /// Cache-bypassing store straight to the pool. Local copies of the touched
    /// lines are dropped so this host cannot read its own stale data.
    pub fn bypass_write(&mut self, offset: u64, bytes: &[u8]) -> CoherenceResult<()> {
        self.check(offset, bytes.len())?;
        if !self.cache.is_empty() && !bytes.is_empty() {
            // write back partial-line neighbours first so their dirty bytes
            // cannot later clobber this store
            let first = line_of(offset);
            let last = line_of(offset + bytes.len() as u64 - 1);
            for line in [first, last] {
                if self.cache.is_dirty(line) {
                    self.cache.drop_line(&self.pool, line)?;
                }
            }
            for line in Self::lines(offset, bytes.len() as u64) {
                self.cache.discard(line);
            }
        }
        self.pool.write(offset, bytes)?;
        Ok(())
    }

    /// Device-initiated write (e.g. a D2H copy). Bypasses the cache when DDIO
    /// is disabled, otherwise behaves like a cached store.
    pub fn device_write(&mut self, offset: u64, bytes: &[u8]) -> CoherenceResult<()> {
        if self.mode.ddio_disabled {
            self.bypass_write(offset, bytes)
        } else {
            self.cached_write(offset, bytes)
        }
    }

    /// Writes back dirty lines in range and removes every line in range.
    pub fn flush(&mut self, offset: u64, len: u64) -> CoherenceResult<()> {
        if self.cache.is_empty() {
            return Ok(());
        }
        let end = offset.saturating_add(len).min(self.pool.config().pool_bytes);
        if end <= offset {
            return Ok(());
        }
        if (end - offset) / LINE_BYTES > self.cache.len() as u64 * 2 {
            // sparse cache, huge range: walk the cache instead of the range
            for line in self.cache.lines() {
                if line + LINE_BYTES > offset && line < end {
                    self.cache.drop_line(&self.pool, line)?;
                }
            }
        } else {
            for line in Self::lines(offset, end - offset) {
                self.cache.drop_line(&self.pool, line)?;
            }
        }
        Ok(())
    }

    /// Drops lines in range. Dirty lines are written back first (CLFLUSH semantics).
    pub fn invalidate(&mut self, offset: u64, len: u64) -> CoherenceResult<()> {
        self.check(offset, len as usize)?;
        self.flush(offset, len)
    }

    /// Plain load: served from cache when present, otherwise filled from the
    /// pool and cached (unless uncacheable).
    pub fn read(&mut self, offset: u64, out: &mut [u8]) -> CoherenceResult<()> {
        self.check(offset, out.len())?;
        let mut pos = 0usize;
        while pos < out.len() {
            let addr = offset + pos as u64;
            let line = line_of(addr);
            let in_line = (addr - line) as usize;
            let n = (LINE - in_line).min(out.len() - pos);
            if self.cache.is_uncacheable(line) {
                self.pool.read(addr, &mut out[pos..pos + n])?;
            } else {
                let i = self.cache.fill(&self.pool, line)? as usize;
                out[pos..pos + n].copy_from_slice(&self.cache.slots[i].data[in_line..in_line + n]);
            }
            pos += n;
        }
        Ok(())
    }

    pub fn read_vec(&mut self, offset: u64, len: usize) -> CoherenceResult<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.read(offset, &mut v)?;
        Ok(v)
    }

    /// Invalidate (with write-back) then load: always observes the pool.
    pub fn read_fresh(&mut self, offset: u64, out: &mut [u8]) -> CoherenceResult<()> {
        if self.mode.break_read_fresh {
            return self.read(offset, out);
        }
        if out.len() as u64 > 4 * LINE_BYTES {
            self.invalidate(offset, out.len() as u64)?;
            return self.read(offset, out);
        }
        // short ranges: reload each line in place
        self.check(offset, out.len())?;
        let mut pos = 0usize;
        while pos < out.len() {
            let addr = offset + pos as u64;
            let line = line_of(addr);
            let in_line = (addr - line) as usize;
            let n = (LINE - in_line).min(out.len() - pos);
            if self.cache.is_uncacheable(line) {
                self.cache.drop_line(&self.pool, line)?;
                self.pool.read(addr, &mut out[pos..pos + n])?;
            } else {
                let i = self.cache.refresh(&self.pool, line)? as usize;
                out[pos..pos + n].copy_from_slice(&self.cache.slots[i].data[in_line..in_line + n]);
            }
            pos += n;
        }
        Ok(())
    }

    pub fn read_fresh_vec(&mut self, offset: u64, len: usize) -> CoherenceResult<Vec<u8>> {
        let mut v = vec![0u8; len];
        self.read_fresh(offset, &mut v)?;
        Ok(v)
    }

    /// Device-initiated read (e.g. an H2D copy). Local lines in range are
    /// written back and dropped, then the bytes come from the pool without
    /// filling the cache. Under `break_read_fresh` it degrades to a plain load.
    pub fn device_read(&mut self, offset: u64, out: &mut [u8]) -> CoherenceResult<()> {
        if self.mode.break_read_fresh {
            return self.read(offset, out);
        }
        self.invalidate(offset, out.len() as u64)?;
        self.pool.read(offset, out)?;
        Ok(())
    }

    /// Marks a range uncacheable for this host. The range is rounded outward to
    /// line boundaries and any resident lines in it are flushed out.
    pub fn set_region_uncacheable(&mut self, offset: u64, len: u64) -> CoherenceResult<()> {
        if len == 0 {
            return Err(CoherenceError::EmptyRange);
        }
        self.check(offset, len as usize)?;
        let start = line_of(offset);
        let end = line_of(offset + len - 1) + LINE_BYTES;
        self.flush(start, end - start)?;
        self.cache.uncacheable.push((start, end));
        Ok(())
    }

    // --- flag words --------------------------------------------------------
    //
    // Flags are 8-byte words that carry cross-host signals. Stores are release
    // stores that bypass the cache; fresh loads are acquire loads after the
    // line is invalidated. Under `break_read_fresh` the load is served from
    // the cache like any plain read.

    pub fn store_flag(&mut self, offset: u64, value: u64) -> CoherenceResult<()> {
        self.cache.drop_line(&self.pool, line_of(offset))?;
        self.pool.store_word(offset, value)?;
        Ok(())
    }

    pub fn load_flag_fresh(&mut self, offset: u64) -> CoherenceResult<u64> {
        let line = line_of(offset);
        if self.mode.break_read_fresh || self.cache.is_uncacheable(line) {
            let mut b = [0u8; 8];
            self.read(offset, &mut b)?;
            std::sync::atomic::fence(Ordering::Acquire);
            return Ok(u64::from_le_bytes(b));
        }
        let i = self.cache.refresh(&self.pool, line)? as usize;
        let v = self.pool.word(offset)?.load(Ordering::Acquire);
        let at = (offset - line) as usize;
        self.cache.slots[i].data[at..at + 8].copy_from_slice(&v.to_le_bytes());
        Ok(v)
    }

    /// Atomic compare-and-swap on a flag word in the pool (AcqRel).
    pub fn cas_flag(&mut self, offset: u64, current: u64, new: u64) -> CoherenceResult<Result<u64, u64>> {
        self.cache.drop_line(&self.pool, line_of(offset))?;
        let r = self
            .pool
            .word(offset)?
            .compare_exchange(current, new, Ordering::AcqRel, Ordering::Acquire);
        Ok(r)
    }

    /// Drops every cached line (dirty ones are written back).
    pub fn flush_all(&mut self) -> CoherenceResult<()> {
        for line in self.cache.lines() {
            self.cache.drop_line(&self.pool, line)?;
        }
        Ok(())
    }

    /// Forgets all cached state without writing anything back, and clears
    /// uncacheable ranges. Used between independent schedules.
    pub fn reset(&mut self) {
        self.cache = HostCache::new(self.cache.capacity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{PoolConfig, MIB};
    use rand::{Rng, SeedableRng};

    fn pool() -> Arc<Pool> {
        Arc::new(Pool::create_in_memory(PoolConfig::new("", 4 * MIB, 2, 64 * 1024).with_chunk(MIB)).unwrap())
    }

    fn pair(p: &Arc<Pool>) -> (CoherentSession, CoherentSession) {
        (CoherentSession::new(p.clone()), CoherentSession::new(p.clone()))
    }

    #[test]
    fn cached_write_is_invisible_remotely_until_flushed() {
        let p = pool();
        let (mut a, mut b) = pair(&p);
        a.cached_write(128, b"new!").unwrap();
        assert_eq!(b.read_vec(128, 4).unwrap(), vec![0; 4]);
        assert_eq!(a.read_vec(128, 4).unwrap(), b"new!");
        a.flush(128, 4).unwrap();
        assert_eq!(b.read_fresh_vec(128, 4).unwrap(), b"new!");
    }

    #[test]
    fn plain_read_can_return_stale_after_bypass() {
        let p = pool();
        let (mut a, mut b) = pair(&p);
        assert_eq!(b.read_vec(0, 8).unwrap(), vec![0; 8]);
        a.bypass_write(0, &[7; 8]).unwrap();
        assert_eq!(b.read_vec(0, 8).unwrap(), vec![0; 8], "second plain read hits the stale line");
        assert_eq!(b.read_fresh_vec(0, 8).unwrap(), vec![7; 8]);
        b.invalidate(0, 8).unwrap();
        assert_eq!(b.read_vec(0, 8).unwrap(), vec![7; 8]);
    }

    #[test]
    fn bypass_write_roundtrips_16k() {
        let p = pool();
        let (mut a, mut b) = pair(&p);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..16384).map(|_| rng.random()).collect();
        a.read_vec(4096, 64).unwrap();
        a.bypass_write(4096, &data).unwrap();
        assert_eq!(a.read_vec(4096, data.len()).unwrap(), data);
        assert_eq!(b.read_fresh_vec(4096, data.len()).unwrap(), data);
    }

    #[test]
    fn flush_removes_exactly_spanned_lines() {
        let p = pool();
        let mut a = CoherentSession::new(p.clone());
        for line in 0..6u64 {
            a.read_vec(line * 64, 1).unwrap();
        }
        // bytes 70..200 touch lines 64, 128, 192
        a.flush(70, 130).unwrap();
        assert_eq!(a.cache().lines(), vec![0, 256, 320]);
    }

    #[test]
    fn flush_of_clean_line_leaves_pool_unchanged() {
        let p = pool();
        p.write(0, &[9; 64]).unwrap();
        let mut a = CoherentSession::new(p.clone());
        a.read_vec(0, 64).unwrap();
        a.flush(0, 64).unwrap();
        a.flush(0, 64).unwrap();
        assert_eq!(p.read_vec(0, 64).unwrap(), vec![9; 64]);
        assert_eq!(a.cache().writebacks(), 0);
    }

    #[test]
    fn uncacheable_region_never_caches() {
        let p = pool();
        let (mut a, mut b) = pair(&p);
        a.set_region_uncacheable(1000, 10).unwrap();
        b.set_region_uncacheable(960, 64).unwrap();
        a.cached_write(1000, b"abc").unwrap();
        assert!(!a.cache().contains(1000));
        assert_eq!(b.read_vec(1000, 3).unwrap(), b"abc");
        assert!(!b.cache().contains(1000));
        assert!(matches!(a.set_region_uncacheable(0, 0), Err(CoherenceError::EmptyRange)));
    }

    #[test]
    fn marking_uncacheable_flushes_dirty_line() {
        let p = pool();
        let mut a = CoherentSession::new(p.clone());
        a.cached_write(2048, b"dirty").unwrap();
        assert_eq!(p.read_vec(2048, 5).unwrap(), vec![0; 5]);
        a.set_region_uncacheable(2050, 1).unwrap();
        assert_eq!(p.read_vec(2048, 5).unwrap(), b"dirty");
        assert!(a.cache().is_empty());
    }

    #[test]
    fn eviction_writes_back_lru_victim() {
        let p = pool();
        let mut a = CoherentSession::with_cache(p.clone(), 2, SessionMode::default());
        a.cached_write(0, &[1]).unwrap();
        a.read_vec(64, 1).unwrap();
        a.read_vec(0, 1).unwrap(); // line 0 now MRU
        a.read_vec(128, 1).unwrap(); // evicts line 64 (clean)
        assert_eq!(a.cache().lines(), vec![0, 128]);
        a.read_vec(192, 1).unwrap(); // evicts line 0 (dirty)
        assert_eq!(p.read_vec(0, 1).unwrap(), vec![1]);
        assert_eq!(a.cache().writebacks(), 1);
    }

    #[test]
    fn out_of_range_is_rejected() {
        let p = pool();
        let mut a = CoherentSession::new(p.clone());
        let end = p.config().pool_bytes;
        assert!(a.cached_write(end - 2, &[0; 4]).is_err());
        assert!(a.bypass_write(end, &[0]).is_err());
        assert!(a.read_vec(end - 1, 2).is_err());
    }

    #[test]
    fn flags_respect_fresh_and_broken_modes() {
        let p = pool();
        let (mut a, mut b) = pair(&p);
        assert_eq!(b.load_flag_fresh(512).unwrap(), 0);
        a.store_flag(512, 5).unwrap();
        assert_eq!(b.load_flag_fresh(512).unwrap(), 5);
        b.set_mode(SessionMode { break_read_fresh: true, ..Default::default() });
        assert_eq!(b.load_flag_fresh(512).unwrap(), 5);
        a.store_flag(512, 6).unwrap();
        assert_eq!(b.load_flag_fresh(512).unwrap(), 5, "broken mode keeps the stale line");
    }

    #[test]
    fn device_write_with_ddio_lands_in_cache() {
        let p = pool();
        let mut a = CoherentSession::with_cache(p.clone(), 64, SessionMode { ddio_disabled: false, break_read_fresh: false });
        a.device_write(0, &[3; 64]).unwrap();
        assert_eq!(p.read_vec(0, 1).unwrap(), vec![0]);
        a.flush(0, 64).unwrap();
        assert_eq!(p.read_vec(0, 1).unwrap(), vec![3]);
    }

    #[test]
    fn dump_lists_lines() {
        let p = pool();
        let mut a = CoherentSession::new(p.clone());
        a.cached_write(64, &[0xaa]).unwrap();
        a.read_vec(0, 1).unwrap();
        let d = a.cache().dump();
        assert!(d.contains("0x00000040 dirty aa"));
        assert!(d.contains("0x00000000 clean"));
    }
}
