//! Emulated memory pool: one file-backed shared mapping that many processes
//! attach to, a fixed-granule block allocator kept inside the mapping, and
//! logical-to-device address translation with chunked interleaving.
//!
//! Backing file layout (little-endian):
//!
//! ```text
//! [0, 4096)                    header (magic, version, config echo, lock word,
//!                              per-device byte counters, channel directory)
//! [4096, data_offset)          allocator bitmap, one bit per block, page rounded
//! [data_offset, +pool_bytes)   data area addressed by logical pool offsets
//! ```

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};

use memmap2::{MmapOptions, MmapRaw};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIB: u64 = 1 << 20;
pub const LINE_BYTES: u64 = 64;
pub const HEADER_BYTES: u64 = 4096;
pub const DEFAULT_CHUNK_BYTES: u64 = 2 * MIB;
pub const MAX_DEVICES: u32 = 64;
pub const MAX_CHANNELS: usize = 16;

const MAGIC: u64 = u64::from_le_bytes(*b"POOLKV01");
const VERSION: u32 = 1;
/// Identifier of the block-hash function recorded in the header (xxh3-128).
pub const HASH_ID_XXH3_128: u32 = 1;

mod hdr {
    pub const MAGIC: usize = 0;
    pub const VERSION: usize = 8;
    pub const HASH_ID: usize = 12;
    pub const POOL_BYTES: usize = 16;
    pub const DEVICE_COUNT: usize = 24;
    pub const INTERLEAVE: usize = 28;
    pub const CHUNK_BYTES: usize = 32;
    pub const BLOCK_BYTES: usize = 40;
    pub const BITMAP_OFFSET: usize = 48;
    pub const BITMAP_BYTES: usize = 56;
    pub const DATA_OFFSET: usize = 64;
    pub const BLOCK_COUNT: usize = 72;
    pub const LOCK: usize = 128;
    pub const LIVE_BLOCKS: usize = 136;
    pub const NEXT_HINT: usize = 144;
    pub const DEVICE_COUNTERS: usize = 256;
    pub const CHANNEL_DIR: usize = 1024;
    pub const CHANNEL_ENTRY: usize = 32;
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pool config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not a pool backing file: {1}")]
    BadRegion(PathBuf, String),
    #[error("offset {offset} (+{len}) out of range for pool of {pool_bytes} bytes")]
    OutOfRange { offset: u64, len: u64, pool_bytes: u64 },
    #[error("pool out of space")]
    OutOfSpace,
    #[error("address {0} is not a block boundary")]
    Misaligned(u64),
    #[error("double free of block at {0}")]
    DoubleFree(u64),
    #[error("channel directory full")]
    DirectoryFull,
    #[error("channel {0} already exists")]
    ChannelExists(u32),
}

pub type PoolResult<T> = Result<T, PoolError>;

/// Geometry of a pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub pool_bytes: u64,
    pub device_count: u32,
    pub interleave_chunk_bytes: u64,
    pub block_bytes: u64,
    /// When false, devices own contiguous `pool_bytes / device_count` ranges.
    pub interleave: bool,
    pub backing_path: PathBuf,
}

impl PoolConfig {
    pub fn new(backing_path: impl Into<PathBuf>, pool_bytes: u64, device_count: u32, block_bytes: u64) -> Self {
        Self {
            pool_bytes,
            device_count,
            interleave_chunk_bytes: DEFAULT_CHUNK_BYTES,
            block_bytes,
            interleave: true,
            backing_path: backing_path.into(),
        }
    }

    pub fn with_chunk(mut self, chunk: u64) -> Self {
        self.interleave_chunk_bytes = chunk;
        self
    }

    pub fn with_interleave(mut self, on: bool) -> Self {
        self.interleave = on;
        self
    }

    pub fn validate(&self) -> PoolResult<()> {
        let bad = |m: String| Err(PoolError::InvalidConfig(m));
        if self.device_count == 0 || self.device_count > MAX_DEVICES {
            return bad(format!("device_count must be in 1..={MAX_DEVICES}"));
        }
        let chunk = self.interleave_chunk_bytes;
        if !chunk.is_power_of_two() || chunk < LINE_BYTES {
            return bad(format!("interleave chunk {chunk} must be a power of two >= 64"));
        }
        let stripe = chunk * self.device_count as u64;
        if self.pool_bytes == 0 || self.pool_bytes % stripe != 0 {
            return bad(format!(
                "pool_bytes {} is not a multiple of device_count x chunk ({stripe})",
                self.pool_bytes
            ));
        }
        if self.block_bytes == 0 || self.block_bytes % LINE_BYTES != 0 {
            return bad(format!("block_bytes {} must be a non-zero multiple of 64", self.block_bytes));
        }
        if self.block_bytes > self.pool_bytes {
            return bad(format!("block_bytes {} exceeds pool_bytes", self.block_bytes));
        }
        Ok(())
    }

    pub fn block_count(&self) -> u64 {
        self.pool_bytes / self.block_bytes
    }

    pub fn device_bytes(&self) -> u64 {
        self.pool_bytes / self.device_count as u64
    }

    fn bitmap_bytes(&self) -> u64 {
        let words = self.block_count().div_ceil(64);
        (words * 8).div_ceil(4096) * 4096
    }

    fn data_offset(&self) -> u64 {
        HEADER_BYTES + self.bitmap_bytes()
    }

    pub fn file_bytes(&self) -> u64 {
        self.data_offset() + self.pool_bytes
    }
}

/// A byte range inside the pool's data area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolAddress {
    pub offset: u64,
    pub length: u64,
}

impl PoolAddress {
    pub fn new(offset: u64, length: u64) -> Self {
        Self { offset, length }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }

    pub fn overlaps(&self, other: &PoolAddress) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceCoordinate {
    pub device_index: u32,
    pub device_offset: u64,
}

/// Maps a logical pool offset to the device holding it.
///
/// Interleaved: chunk `i` lives on device `i mod n` at row `i / n`.
/// Linear: device `offset / (pool_bytes / n)`.
pub fn translate(offset: u64, config: &PoolConfig) -> PoolResult<DeviceCoordinate> {
    if offset >= config.pool_bytes {
        return Err(PoolError::OutOfRange { offset, len: 0, pool_bytes: config.pool_bytes });
    }
    let n = config.device_count as u64;
    if !config.interleave {
        let dev_bytes = config.device_bytes();
        return Ok(DeviceCoordinate {
            device_index: (offset / dev_bytes) as u32,
            device_offset: offset % dev_bytes,
        });
    }
    let chunk = config.interleave_chunk_bytes;
    let chunk_index = offset / chunk;
    Ok(DeviceCoordinate {
        device_index: (chunk_index % n) as u32,
        device_offset: (chunk_index / n) * chunk + offset % chunk,
    })
}

/// Splits `[offset, offset+len)` into per-device byte counts without
/// materialising every chunk.
pub fn device_shares(offset: u64, len: u64, config: &PoolConfig) -> Vec<u64> {
    let mut shares = vec![0u64; config.device_count as usize];
    for_each_share(offset, len, config, |dev, piece| shares[dev] += piece);
    shares
}

fn for_each_share(offset: u64, len: u64, config: &PoolConfig, mut f: impl FnMut(usize, u64)) {
    let span = if config.interleave { config.interleave_chunk_bytes } else { config.device_bytes() };
    let mut pos = offset;
    let end = (offset + len).min(config.pool_bytes);
    while pos < end {
        let next = ((pos / span) + 1) * span;
        let piece = next.min(end) - pos;
        let dev = translate(pos, config).map(|c| c.device_index).unwrap_or(0);
        f(dev as usize, piece);
        pos += piece;
    }
}

/// Directory record for an RPC channel reserved inside the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub id: u32,
    pub slot_count: u32,
    pub payload_bytes: u32,
    pub region: PoolAddress,
}

/// Handle to a mapped pool. Cheap to share across threads through `Arc`.
pub struct Pool {
    map: MmapRaw,
    base: NonNull<u8>,
    config: PoolConfig,
    data_offset: u64,
    accounting: AtomicBool,
    _file: Option<File>,
}

// All access to the mapping goes through raw copies and atomics; the mapping
// itself is shared by design across processes.
unsafe impl Send for Pool {}
unsafe impl Sync for Pool {}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pool").field("config", &self.config).finish()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PoolError + '_ {
    move |source| PoolError::Io { path: path.to_path_buf(), source }
}

impl Pool {
    /// Creates (or truncates) the backing file, zero-fills it and writes the header.
    pub fn create(config: PoolConfig) -> PoolResult<Pool> {
        config.validate()?;
        let path = config.backing_path.clone();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.set_len(config.file_bytes()).map_err(io_err(&path))?;
        let map = MmapOptions::new().map_raw(&file).map_err(io_err(&path))?;
        let pool = Self::from_map(map, config, Some(file));
        pool.write_header();
        Ok(pool)
    }

    /// Anonymous shared mapping, visible only to this process and its threads.
    pub fn create_in_memory(mut config: PoolConfig) -> PoolResult<Pool> {
        config.validate()?;
        config.backing_path = PathBuf::new();
        let map = MmapOptions::new()
            .len(config.file_bytes() as usize)
            .map_anon()
            .map_err(io_err(Path::new("<anon>")))?;
        let pool = Self::from_map(map.into(), config, None);
        pool.write_header();
        Ok(pool)
    }

    /// Maps an existing pool. Never mutates allocator state.
    pub fn attach(path: impl AsRef<Path>) -> PoolResult<Pool> {
        let path = path.as_ref();
        let file = OpenOptions::new().read(true).write(true).open(path).map_err(io_err(path))?;
        let len = file.metadata().map_err(io_err(path))?.len();
        if len < HEADER_BYTES {
            return Err(PoolError::BadRegion(path.into(), format!("file is {len} bytes")));
        }
        let map = MmapOptions::new().map_raw(&file).map_err(io_err(path))?;
        let base = NonNull::new(map.as_mut_ptr()).expect("mmap returned null");
        let rd64 = |off: usize| unsafe { (base.as_ptr().add(off) as *const AtomicU64).as_ref().unwrap().load(Ordering::Acquire) };
        let rd32 = |off: usize| unsafe { (base.as_ptr().add(off) as *const AtomicU32).as_ref().unwrap().load(Ordering::Acquire) };
        if rd64(hdr::MAGIC) != MAGIC {
            return Err(PoolError::BadRegion(path.into(), "bad magic".into()));
        }
        if rd32(hdr::VERSION) != VERSION {
            return Err(PoolError::BadRegion(path.into(), format!("unsupported version {}", rd32(hdr::VERSION))));
        }
        let config = PoolConfig {
            pool_bytes: rd64(hdr::POOL_BYTES),
            device_count: rd32(hdr::DEVICE_COUNT),
            interleave_chunk_bytes: rd64(hdr::CHUNK_BYTES),
            block_bytes: rd64(hdr::BLOCK_BYTES),
            interleave: rd32(hdr::INTERLEAVE) != 0,
            backing_path: path.to_path_buf(),
        };
        config
            .validate()
            .map_err(|e| PoolError::BadRegion(path.into(), e.to_string()))?;
        if config.file_bytes() != len {
            return Err(PoolError::BadRegion(
                path.into(),
                format!("size mismatch: header implies {} bytes, file has {len}", config.file_bytes()),
            ));
        }
        Ok(Self::from_map(map, config, Some(file)))
    }

    fn from_map(map: MmapRaw, config: PoolConfig, file: Option<File>) -> Pool {
        let base = NonNull::new(map.as_mut_ptr()).expect("mmap returned null");
        let data_offset = config.data_offset();
        Pool { map, base, config, data_offset, accounting: AtomicBool::new(true), _file: file }
    }

    fn write_header(&self) {
        let c = &self.config;
        self.hdr_u32(hdr::VERSION).store(VERSION, Ordering::Relaxed);
        self.hdr_u32(hdr::HASH_ID).store(HASH_ID_XXH3_128, Ordering::Relaxed);
        self.hdr_u64(hdr::POOL_BYTES).store(c.pool_bytes, Ordering::Relaxed);
        self.hdr_u32(hdr::DEVICE_COUNT).store(c.device_count, Ordering::Relaxed);
        self.hdr_u32(hdr::INTERLEAVE).store(c.interleave as u32, Ordering::Relaxed);
        self.hdr_u64(hdr::CHUNK_BYTES).store(c.interleave_chunk_bytes, Ordering::Relaxed);
        self.hdr_u64(hdr::BLOCK_BYTES).store(c.block_bytes, Ordering::Relaxed);
        self.hdr_u64(hdr::BITMAP_OFFSET).store(HEADER_BYTES, Ordering::Relaxed);
        self.hdr_u64(hdr::BITMAP_BYTES).store(c.bitmap_bytes(), Ordering::Relaxed);
        self.hdr_u64(hdr::DATA_OFFSET).store(self.data_offset, Ordering::Relaxed);
        self.hdr_u64(hdr::BLOCK_COUNT).store(c.block_count(), Ordering::Relaxed);
        self.hdr_u64(hdr::MAGIC).store(MAGIC, Ordering::Release);
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn hash_id(&self) -> u32 {
        self.hdr_u32(hdr::HASH_ID).load(Ordering::Relaxed)
    }

    /// Header fields as they appear in the mapping (used for cross-process checks).
    pub fn header_summary(&self) -> HeaderSummary {
        HeaderSummary {
            version: self.hdr_u32(hdr::VERSION).load(Ordering::Acquire),
            hash_id: self.hash_id(),
            pool_bytes: self.hdr_u64(hdr::POOL_BYTES).load(Ordering::Acquire),
            device_count: self.hdr_u32(hdr::DEVICE_COUNT).load(Ordering::Acquire),
            interleave: self.hdr_u32(hdr::INTERLEAVE).load(Ordering::Acquire) != 0,
            interleave_chunk_bytes: self.hdr_u64(hdr::CHUNK_BYTES).load(Ordering::Acquire),
            block_bytes: self.hdr_u64(hdr::BLOCK_BYTES).load(Ordering::Acquire),
            block_count: self.hdr_u64(hdr::BLOCK_COUNT).load(Ordering::Acquire),
            data_offset: self.hdr_u64(hdr::DATA_OFFSET).load(Ordering::Acquire),
            live_blocks: self.live_blocks(),
        }
    }

    fn hdr_u64(&self, off: usize) -> &AtomicU64 {
        debug_assert!(off % 8 == 0 && (off as u64) < HEADER_BYTES);
        unsafe { &*(self.base.as_ptr().add(off) as *const AtomicU64) }
    }

    fn hdr_u32(&self, off: usize) -> &AtomicU32 {
        debug_assert!(off % 4 == 0 && (off as u64) < HEADER_BYTES);
        unsafe { &*(self.base.as_ptr().add(off) as *const AtomicU32) }
    }

    fn bitmap_word(&self, i: u64) -> &AtomicU64 {
        unsafe { &*(self.base.as_ptr().add((HEADER_BYTES + i * 8) as usize) as *const AtomicU64) }
    }

    fn check_range(&self, offset: u64, len: u64) -> PoolResult<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.config.pool_bytes => Ok(()),
            _ => Err(PoolError::OutOfRange { offset, len, pool_bytes: self.config.pool_bytes }),
        }
    }

    fn data_ptr(&self, offset: u64) -> *mut u8 {
        unsafe { self.base.as_ptr().add((self.data_offset + offset) as usize) }
    }

    /// Enables or disables per-device byte accounting for writes made through
    /// this handle. Other handles are unaffected.
    pub fn set_accounting(&self, on: bool) {
        self.accounting.store(on, Ordering::Relaxed);
    }

    fn account(&self, offset: u64, len: u64) {
        if !self.accounting.load(Ordering::Relaxed) || len == 0 {
            return;
        }
        for_each_share(offset, len, &self.config, |dev, bytes| {
            self.hdr_u64(hdr::DEVICE_COUNTERS + dev * 8).fetch_add(bytes, Ordering::Relaxed);
        });
    }

    /// Stores bytes straight into the shared region.
    pub fn write(&self, offset: u64, bytes: &[u8]) -> PoolResult<()> {
        self.check_range(offset, bytes.len() as u64)?;
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.data_ptr(offset), bytes.len()) };
        self.account(offset, bytes.len() as u64);
        Ok(())
    }

    /// Loads bytes straight from the shared region.
    pub fn read(&self, offset: u64, out: &mut [u8]) -> PoolResult<()> {
        self.check_range(offset, out.len() as u64)?;
        unsafe { std::ptr::copy_nonoverlapping(self.data_ptr(offset), out.as_mut_ptr(), out.len()) };
        Ok(())
    }

    pub fn read_vec(&self, offset: u64, len: u64) -> PoolResult<Vec<u8>> {
        let mut v = vec![0u8; len as usize];
        self.read(offset, &mut v)?;
        Ok(v)
    }

    /// Atomic view of an 8-byte aligned word in the data area (status flags).
    pub fn word(&self, offset: u64) -> PoolResult<&AtomicU64> {
        self.check_range(offset, 8)?;
        if offset % 8 != 0 {
            return Err(PoolError::Misaligned(offset));
        }
        Ok(unsafe { &*(self.data_ptr(offset) as *const AtomicU64) })
    }

    /// Release-stores a flag word, counting it as a device write.
    pub fn store_word(&self, offset: u64, value: u64) -> PoolResult<()> {
        self.word(offset)?.store(value, Ordering::Release);
        self.account(offset, 8);
        Ok(())
    }

    pub fn device_load_report(&self) -> Vec<u64> {
        (0..self.config.device_count as usize)
            .map(|d| self.hdr_u64(hdr::DEVICE_COUNTERS + d * 8).load(Ordering::Relaxed))
            .collect()
    }

    pub fn reset_device_counters(&self) {
        for d in 0..self.config.device_count as usize {
            self.hdr_u64(hdr::DEVICE_COUNTERS + d * 8).store(0, Ordering::Relaxed);
        }
    }

    /// Zeroes the whole data area. Test and benchmark helper; not safe while
    /// other hosts hold allocations.
    pub fn zero_data(&self) {
        unsafe { std::ptr::write_bytes(self.data_ptr(0), 0, self.config.pool_bytes as usize) };
    }

    // --- allocator -------------------------------------------------------

    fn lock(&self) -> LockGuard<'_> {
        let word = self.hdr_u32(hdr::LOCK);
        let mut spins = 0u32;
        while word.compare_exchange_weak(0, 1, Ordering::Acquire, Ordering::Relaxed).is_err() {
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
        LockGuard { word }
    }

    fn bit(&self, block: u64) -> bool {
        self.bitmap_word(block / 64).load(Ordering::Relaxed) & (1 << (block % 64)) != 0
    }

    fn set_bit(&self, block: u64, on: bool) {
        let w = self.bitmap_word(block / 64);
        let mask = 1u64 << (block % 64);
        let v = w.load(Ordering::Relaxed);
        w.store(if on { v | mask } else { v & !mask }, Ordering::Relaxed);
    }

    pub fn block_addr(&self, block: u64) -> PoolAddress {
        PoolAddress::new(block * self.config.block_bytes, self.config.block_bytes)
    }

    /// Allocates one block from anywhere in the pool.
    pub fn alloc_block(&self) -> PoolResult<PoolAddress> {
        self.alloc_block_in(0, self.config.block_count())
    }

    /// Allocates one block whose index lies in `[first, end)`. Used for
    /// per-host sub-range reservation (see [`HostPartition`]).
    pub fn alloc_block_in(&self, first: u64, end: u64) -> PoolResult<PoolAddress> {
        let end = end.min(self.config.block_count());
        if first >= end {
            return Err(PoolError::OutOfSpace);
        }
        let _g = self.lock();
        let hint = self.hdr_u64(hdr::NEXT_HINT).load(Ordering::Relaxed);
        let start = if (first..end).contains(&hint) { hint } else { first };
        let span = end - first;
        for i in 0..span {
            let b = first + (start - first + i) % span;
            // skip full words quickly
            if b % 64 == 0 && b + 64 <= end && self.bitmap_word(b / 64).load(Ordering::Relaxed) == u64::MAX {
                continue;
            }
            if !self.bit(b) {
                self.set_bit(b, true);
                self.hdr_u64(hdr::LIVE_BLOCKS).fetch_add(1, Ordering::Relaxed);
                self.hdr_u64(hdr::NEXT_HINT).store(b + 1, Ordering::Relaxed);
                return Ok(self.block_addr(b));
            }
        }
        Err(PoolError::OutOfSpace)
    }

    /// Allocates a run of contiguous blocks covering at least `bytes`.
    pub fn alloc_contiguous(&self, bytes: u64) -> PoolResult<PoolAddress> {
        let n = bytes.div_ceil(self.config.block_bytes).max(1);
        let total = self.config.block_count();
        let _g = self.lock();
        let mut run = 0u64;
        for b in 0..total {
            run = if self.bit(b) { 0 } else { run + 1 };
            if run == n {
                let first = b + 1 - n;
                for k in first..=b {
                    self.set_bit(k, true);
                }
                self.hdr_u64(hdr::LIVE_BLOCKS).fetch_add(n, Ordering::Relaxed);
                return Ok(PoolAddress::new(first * self.config.block_bytes, n * self.config.block_bytes));
            }
        }
        Err(PoolError::OutOfSpace)
    }

    /// Returns every block covered by `addr` to the free list.
    pub fn free_block(&self, addr: PoolAddress) -> PoolResult<()> {
        let bb = self.config.block_bytes;
        if addr.offset % bb != 0 {
            return Err(PoolError::Misaligned(addr.offset));
        }
        self.check_range(addr.offset, addr.length.max(bb))?;
        let first = addr.offset / bb;
        let n = addr.length.div_ceil(bb).max(1);
        let _g = self.lock();
        if (first..first + n).any(|b| !self.bit(b)) {
            return Err(PoolError::DoubleFree(addr.offset));
        }
        for b in first..first + n {
            self.set_bit(b, false);
        }
        self.hdr_u64(hdr::LIVE_BLOCKS).fetch_sub(n, Ordering::Relaxed);
        let hint = self.hdr_u64(hdr::NEXT_HINT);
        if first < hint.load(Ordering::Relaxed) {
            hint.store(first, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn is_allocated(&self, addr: PoolAddress) -> bool {
        let bb = self.config.block_bytes;
        addr.offset % bb == 0 && addr.offset / bb < self.config.block_count() && self.bit(addr.offset / bb)
    }

    pub fn live_blocks(&self) -> u64 {
        self.hdr_u64(hdr::LIVE_BLOCKS).load(Ordering::Relaxed)
    }

    pub fn free_bytes(&self) -> u64 {
        (self.config.block_count() - self.live_blocks()) * self.config.block_bytes
    }

    /// Bytes the allocator can hand out (block-rounded data area).
    pub fn capacity_bytes(&self) -> u64 {
        self.config.block_count() * self.config.block_bytes
    }

    // --- channel directory ----------------------------------------------

    fn dir_entry(&self, i: usize) -> (&AtomicU32, &AtomicU32, &AtomicU32, &AtomicU64, &AtomicU64) {
        let base = hdr::CHANNEL_DIR + i * hdr::CHANNEL_ENTRY;
        (
            self.hdr_u32(base),
            self.hdr_u32(base + 4),
            self.hdr_u32(base + 8),
            self.hdr_u64(base + 16),
            self.hdr_u64(base + 24),
        )
    }

    /// Records a channel in the header directory. Channel ids are offset by one
    /// internally so that a zeroed entry reads as empty.
    pub fn register_channel(&self, rec: ChannelRecord) -> PoolResult<()> {
        let _g = self.lock();
        if self.find_channel_locked(rec.id).is_some() {
            return Err(PoolError::ChannelExists(rec.id));
        }
        for i in 0..MAX_CHANNELS {
            let (id, slots, payload, off, len) = self.dir_entry(i);
            if id.load(Ordering::Relaxed) == 0 {
                slots.store(rec.slot_count, Ordering::Relaxed);
                payload.store(rec.payload_bytes, Ordering::Relaxed);
                off.store(rec.region.offset, Ordering::Relaxed);
                len.store(rec.region.length, Ordering::Relaxed);
                id.store(rec.id + 1, Ordering::Release);
                return Ok(());
            }
        }
        Err(PoolError::DirectoryFull)
    }

    pub fn unregister_channel(&self, id: u32) -> Option<ChannelRecord> {
        let _g = self.lock();
        let (i, rec) = self.find_channel_locked(id)?;
        self.dir_entry(i).0.store(0, Ordering::Release);
        Some(rec)
    }

    pub fn find_channel(&self, id: u32) -> Option<ChannelRecord> {
        let _g = self.lock();
        self.find_channel_locked(id).map(|(_, r)| r)
    }

    fn find_channel_locked(&self, want: u32) -> Option<(usize, ChannelRecord)> {
        (0..MAX_CHANNELS).find_map(|i| {
            let (id, slots, payload, off, len) = self.dir_entry(i);
            (id.load(Ordering::Acquire) == want + 1).then(|| {
                (
                    i,
                    ChannelRecord {
                        id: want,
                        slot_count: slots.load(Ordering::Relaxed),
                        payload_bytes: payload.load(Ordering::Relaxed),
                        region: PoolAddress::new(off.load(Ordering::Relaxed), len.load(Ordering::Relaxed)),
                    },
                )
            })
        })
    }

    pub fn channels(&self) -> Vec<ChannelRecord> {
        let _g = self.lock();
        (0..MAX_CHANNELS)
            .filter_map(|i| {
                let id = self.dir_entry(i).0.load(Ordering::Acquire);
                (id != 0).then(|| self.find_channel_locked(id - 1).map(|(_, r)| r)).flatten()
            })
            .collect()
    }

    pub fn mapped_len(&self) -> usize {
        self.map.len()
    }
}

struct LockGuard<'a> {
    word: &'a AtomicU32,
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        self.word.store(0, Ordering::Release);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderSummary {
    pub version: u32,
    pub hash_id: u32,
    pub pool_bytes: u64,
    pub device_count: u32,
    pub interleave: bool,
    pub interleave_chunk_bytes: u64,
    pub block_bytes: u64,
    pub block_count: u64,
    pub data_offset: u64,
    pub live_blocks: u64,
}

/// Splits the block index space evenly among `hosts` so each host allocates
/// from its own sub-range.
#[derive(Debug, Clone, Copy)]
pub struct HostPartition {
    pub host: u32,
    pub hosts: u32,
}

impl HostPartition {
    pub fn block_range(&self, block_count: u64) -> (u64, u64) {
        let per = block_count / self.hosts as u64;
        let first = per * self.host as u64;
        let end = if self.host + 1 == self.hosts { block_count } else { first + per };
        (first, end)
    }

    pub fn alloc(&self, pool: &Pool) -> PoolResult<PoolAddress> {
        let (a, b) = self.block_range(pool.config().block_count());
        pool.alloc_block_in(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(devices: u32, chunk: u64, pool: u64) -> PoolConfig {
        PoolConfig::new("", pool, devices, chunk).with_chunk(chunk)
    }

    #[test]
    fn rejects_pool_not_multiple_of_stripe() {
        let c = PoolConfig::new("", 3 * MIB, 4, 64 * 1024);
        assert!(matches!(c.validate(), Err(PoolError::InvalidConfig(_))));
    }

    #[test]
    fn rejects_non_power_of_two_chunk() {
        let c = PoolConfig::new("", 12 * MIB, 4, 4096).with_chunk(3 * MIB);
        assert!(c.validate().is_err());
    }

    #[test]
    fn translate_examples() {
        let c = PoolConfig::new("", 64 * MIB, 4, MIB);
        assert_eq!(translate(0, &c).unwrap(), DeviceCoordinate { device_index: 0, device_offset: 0 });
        assert_eq!(translate(2 * MIB, &c).unwrap(), DeviceCoordinate { device_index: 1, device_offset: 0 });
        assert_eq!(translate(9 * MIB, &c).unwrap(), DeviceCoordinate { device_index: 0, device_offset: 3 * MIB });
        assert!(translate(64 * MIB, &c).is_err());
    }

    #[test]
    fn translate_is_bijection_on_small_pools() {
        for devices in 1..=5u32 {
            for chunk in [64u64, 128, 256] {
                let c = small(devices, chunk, chunk * devices as u64 * 3);
                let dev_bytes = c.device_bytes();
                let mut seen = vec![false; c.pool_bytes as usize];
                for off in 0..c.pool_bytes {
                    let d = translate(off, &c).unwrap();
                    assert!(d.device_offset < dev_bytes);
                    let flat = (d.device_index as u64 * dev_bytes + d.device_offset) as usize;
                    assert!(!seen[flat], "collision at {off}");
                    seen[flat] = true;
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn shares_match_per_byte_enumeration() {
        let c = small(3, 64, 64 * 3 * 4);
        for (off, len) in [(0u64, 768u64), (10, 300), (63, 2), (100, 0), (700, 68)] {
            let mut want = vec![0u64; 3];
            for b in off..off + len {
                want[translate(b, &c).unwrap().device_index as usize] += 1;
            }
            assert_eq!(device_shares(off, len, &c), want, "range {off}+{len}");
        }
    }

    #[test]
    fn alloc_until_exhausted() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 4 * MIB, 4, 256 * 1024).with_chunk(MIB)).unwrap();
        let n = pool.config().block_count();
        let mut got = Vec::new();
        for _ in 0..n {
            got.push(pool.alloc_block().unwrap());
        }
        assert!(matches!(pool.alloc_block(), Err(PoolError::OutOfSpace)));
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                assert!(!a.overlaps(b));
            }
        }
        pool.free_block(got[3]).unwrap();
        assert_eq!(pool.alloc_block().unwrap(), got[3]);
    }

    #[test]
    fn double_free_rejected() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 4 * MIB, 1, 64 * 1024).with_chunk(MIB)).unwrap();
        let a = pool.alloc_block().unwrap();
        pool.free_block(a).unwrap();
        assert!(matches!(pool.free_block(a), Err(PoolError::DoubleFree(_))));
        assert!(matches!(pool.free_block(PoolAddress::new(100, 64)), Err(PoolError::Misaligned(100))));
    }

    #[test]
    fn capacity_is_conserved() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 8 * MIB, 2, 64 * 1024).with_chunk(MIB)).unwrap();
        let cap = pool.capacity_bytes();
        let blocks: Vec<_> = (0..37).map(|_| pool.alloc_block().unwrap()).collect();
        assert_eq!(pool.free_bytes() + 37 * 64 * 1024, cap);
        for b in blocks {
            pool.free_block(b).unwrap();
        }
        assert_eq!(pool.free_bytes(), cap);
    }

    #[test]
    fn contiguous_write_spreads_evenly() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 64 * MIB, 4, MIB)).unwrap();
        let buf = vec![0xabu8; MIB as usize];
        for i in 0..64 {
            pool.write(i * MIB, &buf).unwrap();
        }
        assert_eq!(pool.device_load_report(), vec![16 * MIB; 4]);
        pool.reset_device_counters();
        assert_eq!(pool.device_load_report(), vec![0; 4]);
    }

    #[test]
    fn single_device_gets_everything() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 8 * MIB, 1, MIB)).unwrap();
        pool.write(3 * MIB + 5, &[1u8; 4096]).unwrap();
        assert_eq!(pool.device_load_report(), vec![4096]);
    }

    #[test]
    fn host_partition_stays_in_range() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 8 * MIB, 2, 64 * 1024).with_chunk(MIB)).unwrap();
        let part = HostPartition { host: 1, hosts: 4 };
        let (a, b) = part.block_range(pool.config().block_count());
        for _ in 0..(b - a) {
            let addr = part.alloc(&pool).unwrap();
            let blk = addr.offset / 65536;
            assert!((a..b).contains(&blk));
        }
        assert!(matches!(part.alloc(&pool), Err(PoolError::OutOfSpace)));
    }

    #[test]
    fn file_backed_create_attach_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pool");
        let pool = Pool::create(PoolConfig::new(&path, 16 * MIB, 4, MIB)).unwrap();
        pool.write(123, b"hello").unwrap();
        let a = pool.alloc_block().unwrap();
        let other = Pool::attach(&path).unwrap();
        assert_eq!(other.header_summary(), pool.header_summary());
        assert_eq!(other.read_vec(123, 5).unwrap(), b"hello");
        assert!(other.is_allocated(a));
        assert!(Pool::attach(dir.path().join("missing")).is_err());
        std::fs::write(dir.path().join("junk"), vec![0u8; 8192]).unwrap();
        assert!(matches!(Pool::attach(dir.path().join("junk")), Err(PoolError::BadRegion(..))));
    }

    #[test]
    fn channel_directory() {
        let pool = Pool::create_in_memory(PoolConfig::new("", 8 * MIB, 2, 64 * 1024).with_chunk(MIB)).unwrap();
        let rec = ChannelRecord { id: 0, slot_count: 128, payload_bytes: 64, region: PoolAddress::new(0, 65536) };
        pool.register_channel(rec).unwrap();
        assert!(matches!(pool.register_channel(rec), Err(PoolError::ChannelExists(0))));
        assert_eq!(pool.find_channel(0), Some(rec));
        assert_eq!(pool.channels(), vec![rec]);
        assert_eq!(pool.unregister_channel(0), Some(rec));
        assert_eq!(pool.find_channel(0), None);
    }
}
