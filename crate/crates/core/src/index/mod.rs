//! Global KV-cache index: chained token-block hashes mapped to pool blocks.
//!
//! Entries become visible to readers only after the single writer completes
//! its two-phase insert. Eviction is LRU over unpinned, ready entries.

pub mod service;

use std::collections::BTreeSet;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_128;

use crate::pool::{Pool, PoolAddress, PoolError};

pub const DEFAULT_BLOCK_TOKENS: usize = 16;

/// 128-bit chained digest of a token block and everything before it.
///
/// `chain_hash(parent, tokens) = xxh3_128(parent_le ‖ tokens_le_u32)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockHash(pub u128);

impl BlockHash {
    /// Parent of the first block of every prompt.
    pub const ROOT: BlockHash = BlockHash(0x6b76_5f72_6f6f_745f_6861_7368_5f76_3031);

    pub fn to_le_bytes(self) -> [u8; 16] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 16]) -> Self {
        BlockHash(u128::from_le_bytes(b))
    }
}

impl std::fmt::Display for BlockHash {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IndexError {
    #[error("block has {got} tokens, expected {want}")]
    WrongBlockLength { got: usize, want: usize },
    #[error("insert for {0} already in flight")]
    InFlight(BlockHash),
    #[error("{0} is already cached")]
    AlreadyPresent(BlockHash),
    #[error("unknown ticket {0}")]
    BadTicket(u64),
    #[error("{0} not found")]
    NotFound(BlockHash),
    #[error("{0} is not pinned")]
    NotPinned(BlockHash),
    #[error("eviction request must be > 0 bytes")]
    EmptyRequest,
    #[error("pool error: {0}")]
    Pool(String),
}

impl From<PoolError> for IndexError {
    fn from(e: PoolError) -> Self {
        IndexError::Pool(e.to_string())
    }
}

pub type IndexResult<T> = Result<T, IndexError>;

pub fn chain_hash(parent: BlockHash, tokens: &[u32], block_tokens: usize) -> IndexResult<BlockHash> {
    if tokens.len() != block_tokens {
        return Err(IndexError::WrongBlockLength { got: tokens.len(), want: block_tokens });
    }
    let mut buf = Vec::with_capacity(16 + 4 * tokens.len());
    buf.extend_from_slice(&parent.to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    Ok(BlockHash(xxh3_128(&buf)))
}

/// Hashes of every full block of a prompt, in order.
pub fn prompt_hashes(tokens: &[u32], block_tokens: usize) -> Vec<BlockHash> {
    let mut parent = BlockHash::ROOT;
    tokens
        .chunks_exact(block_tokens)
        .map(|blk| {
            parent = chain_hash(parent, blk, block_tokens).expect("exact chunk");
            parent
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryState {
    Writing,
    Ready,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub hash: BlockHash,
    pub addr: PoolAddress,
    pub state: EntryState,
    pub ref_count: u32,
    pub last_access: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ticket(pub u64);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictOutcome {
    pub freed: Vec<PoolAddress>,
    pub freed_bytes: u64,
    /// False when the request could not be met in full.
    pub satisfied: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexStats {
    pub entries: u64,
    pub ready: u64,
    pub writing: u64,
    pub pinned: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
    pub capacity_bytes: u64,
}

pub struct KvIndex {
    pool: Arc<Pool>,
    block_tokens: usize,
    entries: FxHashMap<BlockHash, IndexEntry>,
    tickets: FxHashMap<u64, BlockHash>,
    // (last_access, hash) for every READY entry
    lru: BTreeSet<(u64, BlockHash)>,
    clock: u64,
    next_ticket: u64,
}

impl KvIndex {
    pub fn new(pool: Arc<Pool>) -> Self {
        Self::with_block_tokens(pool, DEFAULT_BLOCK_TOKENS)
    }

    pub fn with_block_tokens(pool: Arc<Pool>, block_tokens: usize) -> Self {
        Self {
            pool,
            block_tokens,
            entries: FxHashMap::default(),
            tickets: FxHashMap::default(),
            lru: BTreeSet::new(),
            clock: 0,
            next_ticket: 1,
        }
    }

    pub fn block_tokens(&self) -> usize {
        self.block_tokens
    }

    pub fn pool(&self) -> &Arc<Pool> {
        &self.pool
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Starts a two-phase insert. The entry stays invisible until `complete`.
    pub fn insert(&mut self, hash: BlockHash, addr: PoolAddress) -> IndexResult<Ticket> {
        if let Some(e) = self.entries.get(&hash) {
            return Err(match e.state {
                EntryState::Writing => IndexError::InFlight(hash),
                EntryState::Ready => IndexError::AlreadyPresent(hash),
            });
        }
        let now = self.tick();
        let t = self.next_ticket;
        self.next_ticket += 1;
        self.entries.insert(hash, IndexEntry { hash, addr, state: EntryState::Writing, ref_count: 0, last_access: now });
        self.tickets.insert(t, hash);
        Ok(Ticket(t))
    }

    pub fn complete(&mut self, ticket: Ticket) -> IndexResult<IndexEntry> {
        let hash = self.tickets.remove(&ticket.0).ok_or(IndexError::BadTicket(ticket.0))?;
        let now = self.tick();
        let e = self.entries.get_mut(&hash).ok_or(IndexError::BadTicket(ticket.0))?;
        e.state = EntryState::Ready;
        e.last_access = now;
        self.lru.insert((now, hash));
        Ok(*e)
    }

    /// Drops an in-flight insert; the caller keeps ownership of the block.
    pub fn abort(&mut self, ticket: Ticket) -> IndexResult<PoolAddress> {
        let hash = self.tickets.remove(&ticket.0).ok_or(IndexError::BadTicket(ticket.0))?;
        let e = self.entries.remove(&hash).ok_or(IndexError::BadTicket(ticket.0))?;
        Ok(e.addr)
    }

    fn touch(&mut self, hash: BlockHash) -> Option<IndexEntry> {
        let now = self.clock + 1;
        let e = self.entries.get_mut(&hash)?;
        if e.state != EntryState::Ready {
            return None;
        }
        self.clock = now;
        self.lru.remove(&(e.last_access, hash));
        e.last_access = now;
        self.lru.insert((now, hash));
        Some(*e)
    }

    /// Ready entries only; refreshes recency.
    pub fn lookup(&mut self, hash: BlockHash) -> Option<IndexEntry> {
        self.touch(hash)
    }

    /// Any entry, without touching recency.
    pub fn peek(&self, hash: BlockHash) -> Option<&IndexEntry> {
        self.entries.get(&hash)
    }

    /// Looks up and pins a ready entry so it cannot be evicted.
    pub fn pin(&mut self, hash: BlockHash) -> Option<IndexEntry> {
        self.touch(hash)?;
        let e = self.entries.get_mut(&hash)?;
        e.ref_count += 1;
        Some(*e)
    }

    pub fn unpin(&mut self, hash: BlockHash) -> IndexResult<()> {
        let e = self.entries.get_mut(&hash).ok_or(IndexError::NotFound(hash))?;
        if e.ref_count == 0 {
            return Err(IndexError::NotPinned(hash));
        }
        e.ref_count -= 1;
        Ok(())
    }

    /// Longest prefix of full blocks whose chained hashes are all ready.
    pub fn match_prefix(&mut self, tokens: &[u32]) -> Vec<(BlockHash, PoolAddress)> {
        let mut out = Vec::new();
        let mut parent = BlockHash::ROOT;
        for blk in tokens.chunks_exact(self.block_tokens) {
            let h = chain_hash(parent, blk, self.block_tokens).expect("exact chunk");
            match self.touch(h) {
                Some(e) => out.push((h, e.addr)),
                None => break,
            }
            parent = h;
        }
        out
    }

    /// Evicts unpinned ready entries, least recently used first, until at
    /// least `bytes_needed` bytes are back in the pool or nothing evictable
    /// remains.
    pub fn evict(&mut self, bytes_needed: u64) -> IndexResult<EvictOutcome> {
        if bytes_needed == 0 {
            return Err(IndexError::EmptyRequest);
        }
        let mut out = EvictOutcome::default();
        let victims: Vec<(u64, BlockHash)> = self
            .lru
            .iter()
            .filter(|(_, h)| self.entries[h].ref_count == 0)
            .copied()
            .collect();
        for key in victims {
            if out.freed_bytes >= bytes_needed {
                break;
            }
            let e = self.entries.remove(&key.1).expect("lru entry exists");
            self.lru.remove(&key);
            self.pool.free_block(e.addr)?;
            out.freed_bytes += self.block_span(e.addr);
            out.freed.push(e.addr);
        }
        out.satisfied = out.freed_bytes >= bytes_needed;
        Ok(out)
    }

    fn block_span(&self, addr: PoolAddress) -> u64 {
        let bb = self.pool.config().block_bytes;
        addr.length.div_ceil(bb).max(1) * bb
    }

    /// Allocates a block, evicting if the pool is full.
    pub fn alloc_or_evict(&mut self) -> IndexResult<PoolAddress> {
        match self.pool.alloc_block() {
            Ok(a) => Ok(a),
            Err(PoolError::OutOfSpace) => {
                let need = self.pool.config().block_bytes;
                self.evict(need)?;
                Ok(self.pool.alloc_block()?)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by hash.
    pub fn entries(&self) -> Vec<IndexEntry> {
        let mut v: Vec<_> = self.entries.values().copied().collect();
        v.sort_by_key(|e| e.hash);
        v
    }

    pub fn stats(&self) -> IndexStats {
        let mut s = IndexStats {
            free_bytes: self.pool.free_bytes(),
            capacity_bytes: self.pool.capacity_bytes(),
            ..Default::default()
        };
        for e in self.entries.values() {
            s.entries += 1;
            match e.state {
                EntryState::Ready => s.ready += 1,
                EntryState::Writing => s.writing += 1,
            }
            if e.ref_count > 0 {
                s.pinned += 1;
            }
            s.live_bytes += self.block_span(e.addr);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{PoolConfig, MIB};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, HashSet};

    fn index(blocks: u64) -> KvIndex {
        let bb = 64 * 1024;
        let pool = Pool::create_in_memory(PoolConfig::new("", blocks * bb, 1, bb).with_chunk(bb)).unwrap();
        KvIndex::new(Arc::new(pool))
    }

    fn block(seed: u32) -> Vec<u32> {
        (0..16).map(|i| seed.wrapping_mul(31) + i).collect()
    }

    #[test]
    fn chain_hash_properties() {
        let a = block(1);
        let b = block(2);
        let h1 = chain_hash(BlockHash::ROOT, &a, 16).unwrap();
        assert_eq!(h1, chain_hash(BlockHash::ROOT, &a, 16).unwrap());
        let ab = chain_hash(chain_hash(BlockHash::ROOT, &a, 16).unwrap(), &b, 16).unwrap();
        let ba = chain_hash(chain_hash(BlockHash::ROOT, &b, 16).unwrap(), &a, 16).unwrap();
        assert_ne!(ab, ba);
        assert_eq!(
            chain_hash(BlockHash::ROOT, &a[..15], 16),
            Err(IndexError::WrongBlockLength { got: 15, want: 16 })
        );
    }

    #[test]
    fn single_token_change_changes_digest() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seen = HashSet::with_capacity(1 << 21);
        for _ in 0..1_000_000 {
            let mut t: Vec<u32> = (0..16).map(|_| rng.random()).collect();
            let h = chain_hash(BlockHash::ROOT, &t, 16).unwrap();
            let i = rng.random_range(0..16);
            t[i] ^= 1 + rng.random_range(0..u32::MAX - 1);
            let h2 = chain_hash(BlockHash::ROOT, &t, 16).unwrap();
            assert_ne!(h, h2);
            assert!(seen.insert(h));
        }
    }

    #[test]
    fn two_phase_visibility() {
        let mut ix = index(8);
        let addr = ix.pool().alloc_block().unwrap();
        let h = chain_hash(BlockHash::ROOT, &block(0), 16).unwrap();
        let t = ix.insert(h, addr).unwrap();
        assert_eq!(ix.lookup(h), None);
        assert_eq!(ix.insert(h, addr), Err(IndexError::InFlight(h)));
        ix.complete(t).unwrap();
        assert_eq!(ix.lookup(h).unwrap().addr, addr);
        assert_eq!(ix.insert(h, addr), Err(IndexError::AlreadyPresent(h)));
        assert_eq!(ix.complete(t), Err(IndexError::BadTicket(t.0)));
        assert_eq!(ix.lookup(BlockHash(42)), None);
    }

    #[test]
    fn abort_forgets_entry() {
        let mut ix = index(4);
        let addr = ix.pool().alloc_block().unwrap();
        let t = ix.insert(BlockHash(5), addr).unwrap();
        assert_eq!(ix.abort(t).unwrap(), addr);
        assert!(ix.is_empty());
        ix.insert(BlockHash(5), addr).unwrap();
    }

    fn cache_prompt(ix: &mut KvIndex, tokens: &[u32]) {
        for h in prompt_hashes(tokens, 16) {
            if ix.peek(h).is_none() {
                let a = ix.alloc_or_evict().unwrap();
                let t = ix.insert(h, a).unwrap();
                ix.complete(t).unwrap();
            }
        }
    }

    #[test]
    fn match_prefix_examples() {
        let mut ix = index(32);
        let p: Vec<u32> = (0..64).collect();
        assert!(ix.match_prefix(&p).is_empty());
        cache_prompt(&mut ix, &p);
        assert_eq!(ix.match_prefix(&p).len(), 4);
        let mut q = p.clone();
        q[40] = 9999;
        assert_eq!(ix.match_prefix(&q).len(), 2);
        // trailing partial block is ignored
        assert_eq!(ix.match_prefix(&p[..61]).len(), 3);
    }

    #[test]
    fn evict_lru_and_pinning() {
        let mut ix = index(4);
        let hs: Vec<BlockHash> = (0..3).map(|i| BlockHash(i + 100)).collect();
        for &h in &hs {
            let a = ix.pool().alloc_block().unwrap();
            let t = ix.insert(h, a).unwrap();
            ix.complete(t).unwrap();
        }
        ix.lookup(hs[0]); // hs[1] is now oldest
        ix.pin(hs[1]).unwrap();
        let out = ix.evict(1).unwrap();
        assert!(out.satisfied);
        assert_eq!(out.freed.len(), 1);
        assert!(ix.peek(hs[2]).is_none(), "oldest unpinned goes first");
        let out = ix.evict(10 * MIB).unwrap();
        assert!(!out.satisfied);
        assert!(ix.peek(hs[1]).is_some(), "pinned survives");
        ix.unpin(hs[1]).unwrap();
        assert_eq!(ix.unpin(hs[1]), Err(IndexError::NotPinned(hs[1])));
        assert_eq!(ix.evict(0), Err(IndexError::EmptyRequest));
    }

    #[test]
    fn writing_entries_are_never_evicted() {
        let mut ix = index(2);
        let a = ix.pool().alloc_block().unwrap();
        ix.insert(BlockHash(1), a).unwrap();
        let out = ix.evict(1).unwrap();
        assert!(out.freed.is_empty() && !out.satisfied);
    }

    #[test]
    fn lru_matches_reference_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ix = index(64);
        // reference: hash -> last access time, evict min time first
        let mut model: BTreeMap<u128, u64> = BTreeMap::new();
        let mut now = 0u64;
        for _ in 0..1000 {
            now += 1;
            let key = rng.random_range(0..80u128);
            match rng.random_range(0..3) {
                0 if !model.contains_key(&key) && ix.pool().free_bytes() > 0 => {
                    let a = ix.pool().alloc_block().unwrap();
                    let t = ix.insert(BlockHash(key), a).unwrap();
                    ix.complete(t).unwrap();
                    model.insert(key, now);
                }
                1 => {
                    let got = ix.lookup(BlockHash(key)).is_some();
                    assert_eq!(got, model.contains_key(&key));
                    if got {
                        model.insert(key, now);
                    }
                }
                _ => {
                    let n = rng.random_range(1..4u64);
                    let out = ix.evict(n * 64 * 1024).unwrap();
                    let mut order: Vec<(u64, u128)> = model.iter().map(|(&k, &t)| (t, k)).collect();
                    order.sort();
                    let want: Vec<u128> = order.iter().take(n as usize).map(|&(_, k)| k).collect();
                    for k in &want {
                        model.remove(k);
                    }
                    assert_eq!(out.freed.len(), want.len());
                    for k in want {
                        assert!(ix.peek(BlockHash(k)).is_none());
                    }
                }
            }
            let s = ix.stats();
            assert_eq!(s.live_bytes + s.free_bytes, s.capacity_bytes);
            assert_eq!(s.entries as usize, model.len());
        }
    }
}
