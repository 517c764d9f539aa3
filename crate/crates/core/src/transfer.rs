//! Scatter/gather transfers between a fragmented device-side KV layout and
//! contiguous pool blocks.
//!
//! Device memory is an in-process arena ([`FragmentedBuffer`]). Each
//! `(layer, K|V)` pair owns a region of the arena holding one chunk per block,
//! and regions are separated by gaps. Inside a chunk the bytes are head-major:
//! `[head][token][dim]`.
//!
//! A pool block is the chunks of one block laid out layer-major, K before V.
//!
//! Descriptor conventions:
//!
//! * gather lists: `src` is an arena offset, `dst` is relative to the block
//! * scatter lists: `src` is relative to the block, `dst` is an arena offset
//! * sparse lists: `src` is relative to the concatenation of the selected
//!   blocks (block `i` starts at `i * block_bytes`), `dst` is an arena offset

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::{CoherenceError, CoherentSession};
use crate::pool::{PoolAddress, LINE_BYTES};

pub const DEFAULT_TOKENS_PER_BLOCK: usize = 16;
pub const BUILTIN_PRESETS: &str = include_str!("../presets/layouts.txt");

#[derive(Debug, Error)]
pub enum TransferError {
    #[error(transparent)]
    Coherence(#[from] CoherenceError),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("presets line {line}: {msg}")]
    BadPreset { line: usize, msg: String },
    #[error("unknown layout profile {0:?}")]
    UnknownProfile(String),
    #[error("layout does not match buffer")]
    LayoutMismatch,
    #[error("block {block} out of range (buffer holds {blocks})")]
    BlockOutOfRange { block: usize, blocks: usize },
    #[error("token {token} out of range (limit {limit})")]
    TokenOutOfRange { token: u32, limit: usize },
    #[error("descriptors move {descriptors} bytes, target is {target}")]
    LengthMismatch { descriptors: u64, target: u64 },
    #[error("descriptor {index} source out of range")]
    SourceOutOfRange { index: usize },
    #[error("descriptor {index} destination out of range")]
    DestinationOutOfRange { index: usize },
    #[error("descriptor {index} destination overlaps another descriptor")]
    DestinationOverlap { index: usize },
    #[error("staging buffer holds {have} bytes, need {need}")]
    StagingTooSmall { have: usize, need: usize },
}

pub type TransferResult<T> = Result<T, TransferError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KVLayoutSpec {
    pub name: String,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub bytes_per_element: usize,
    pub tokens_per_block: usize,
}

impl KVLayoutSpec {
    pub fn new(
        name: impl Into<String>,
        n_layers: usize,
        n_kv_heads: usize,
        head_dim: usize,
        bytes_per_element: usize,
    ) -> TransferResult<Self> {
        let spec = Self {
            name: name.into(),
            n_layers,
            n_kv_heads,
            head_dim,
            bytes_per_element,
            tokens_per_block: DEFAULT_TOKENS_PER_BLOCK,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_tokens_per_block(mut self, tokens: usize) -> TransferResult<Self> {
        self.tokens_per_block = tokens;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> TransferResult<()> {
        let dims = [self.n_layers, self.n_kv_heads, self.head_dim, self.bytes_per_element, self.tokens_per_block];
        if dims.contains(&0) {
            return Err(TransferError::InvalidLayout(format!("{}: every dimension must be positive", self.name)));
        }
        Ok(())
    }

    pub fn per_token_per_head_bytes(&self) -> usize {
        self.head_dim * self.bytes_per_element
    }

    pub fn chunk_bytes(&self) -> usize {
        self.tokens_per_block * self.n_kv_heads * self.per_token_per_head_bytes()
    }

    pub fn chunks_per_block(&self) -> usize {
        self.n_layers * 2
    }

    pub fn block_bytes(&self) -> usize {
        self.chunk_bytes() * self.chunks_per_block()
    }

    /// Offset of `(layer, kv)`'s chunk inside a pool block.
    pub fn chunk_in_block(&self, layer: usize, kv: usize) -> usize {
        (layer * 2 + kv) * self.chunk_bytes()
    }

    /// Offset of `(head, token)` inside a chunk.
    pub fn in_chunk_offset(&self, head: usize, token: usize) -> usize {
        (head * self.tokens_per_block + token) * self.per_token_per_head_bytes()
    }

    fn same_geometry(&self, other: &KVLayoutSpec) -> bool {
        (self.n_layers, self.n_kv_heads, self.head_dim, self.bytes_per_element, self.tokens_per_block)
            == (other.n_layers, other.n_kv_heads, other.head_dim, other.bytes_per_element, other.tokens_per_block)
    }
}

/// Parses `name, n_layers, n_kv_heads, head_dim, bytes_per_element` lines.
/// Blank lines and `#` comments are ignored.
pub fn parse_presets(text: &str) -> TransferResult<Vec<KVLayoutSpec>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| TransferError::BadPreset { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", fields.len())));
        }
        let mut nums = [0usize; 4];
        for (n, f) in nums.iter_mut().zip(&fields[1..]) {
            *n = f.parse().map_err(|_| bad(format!("not a number: {f:?}")))?;
        }
        let spec = KVLayoutSpec::new(fields[0], nums[0], nums[1], nums[2], nums[3]).map_err(|e| bad(e.to_string()))?;
        out.push(spec);
    }
    Ok(out)
}

pub fn builtin_presets() -> Vec<KVLayoutSpec> {
    parse_presets(BUILTIN_PRESETS).expect("built-in presets parse")
}

pub fn find_preset(presets: &[KVLayoutSpec], name: &str) -> TransferResult<KVLayoutSpec> {
    presets.iter().find(|p| p.name == name).cloned().ok_or_else(|| TransferError::UnknownProfile(name.to_string()))
}

/// Emulated device memory holding `blocks` blocks of KV data, one region per
/// `(layer, kv)` pair. Regions are disjoint and never adjacent.
#[derive(Debug, Clone)]
pub struct FragmentedBuffer {
    layout: KVLayoutSpec,
    blocks: usize,
    region_base: Vec<usize>,
    arena: Vec<u8>,
}

impl FragmentedBuffer {
    /// Zero-filled buffer; region order and gap sizes are drawn from `seed`.
    pub fn new(layout: &KVLayoutSpec, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions = layout.chunks_per_block();
        let region_bytes = blocks * layout.chunk_bytes();
        let mut order: Vec<usize> = (0..regions).collect();
        order.shuffle(&mut rng);
        let mut region_base = vec![0usize; regions];
        let mut cursor = 0usize;
        for r in order {
            cursor += LINE_BYTES as usize * rng.random_range(1..=16usize);
            region_base[r] = cursor;
            cursor += region_bytes;
        }
        cursor += LINE_BYTES as usize;
        Self { layout: layout.clone(), blocks, region_base, arena: vec![0u8; cursor] }
    }

    pub fn layout(&self) -> &KVLayoutSpec {
        &self.layout
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn arena(&self) -> &[u8] {
        &self.arena
    }

    pub fn arena_mut(&mut self) -> &mut [u8] {
        &mut self.arena
    }

    pub fn region_base(&self, layer: usize, kv: usize) -> usize {
        self.region_base[layer * 2 + kv]
    }

    pub fn chunk_offset(&self, block: usize, layer: usize, kv: usize) -> usize {
        self.region_base(layer, kv) + block * self.layout.chunk_bytes()
    }

    pub fn regions(&self) -> Vec<Range<usize>> {
        let len = self.blocks * self.layout.chunk_bytes();
        self.region_base.iter().map(|&b| b..b + len).collect()
    }

    pub fn fill_random(&mut self, seed: u64) {
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut self.arena);
    }

    fn check(&self, layout: &KVLayoutSpec) -> TransferResult<()> {
        if self.layout.same_geometry(layout) {
            Ok(())
        } else {
            Err(TransferError::LayoutMismatch)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub src_offset: u64,
    pub dst_offset: u64,
    pub length: u64,
}

impl Descriptor {
    pub fn new(src_offset: u64, dst_offset: u64, length: u64) -> Self {
        Self { src_offset, dst_offset, length }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DescriptorList {
    descs: Vec<Descriptor>,
}

impl DescriptorList {
    pub fn new(descs: Vec<Descriptor>) -> Self {
        Self { descs }
    }

    pub fn push(&mut self, d: Descriptor) {
        self.descs.push(d);
    }

    pub fn len(&self) -> usize {
        self.descs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descs.is_empty()
    }

    pub fn as_slice(&self) -> &[Descriptor] {
        &self.descs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Descriptor> {
        self.descs.iter()
    }

    pub fn total_bytes(&self) -> u64 {
        self.descs.iter().map(|d| d.length).sum()
    }

    /// Same transfers with source and destination swapped.
    pub fn reversed(&self) -> DescriptorList {
        DescriptorList::new(self.descs.iter().map(|d| Descriptor::new(d.dst_offset, d.src_offset, d.length)).collect())
    }

    /// Checks destination ranges are pairwise disjoint and end at or before `limit`.
    pub fn check_destinations(&self, limit: u64) -> TransferResult<()> {
        let mut idx: Vec<usize> = (0..self.descs.len()).collect();
        idx.sort_unstable_by_key(|&i| self.descs[i].dst_offset);
        let mut end = 0u64;
        for (n, &i) in idx.iter().enumerate() {
            let d = self.descs[i];
            let d_end = d.dst_offset.checked_add(d.length).ok_or(TransferError::DestinationOutOfRange { index: i })?;
            if d_end > limit {
                return Err(TransferError::DestinationOutOfRange { index: i });
            }
            if n > 0 && d.dst_offset < end {
                return Err(TransferError::DestinationOverlap { index: i });
            }
            end = end.max(d_end);
        }
        Ok(())
    }

    fn check_sources(&self, limit: u64) -> TransferResult<()> {
        for (i, d) in self.descs.iter().enumerate() {
            match d.src_offset.checked_add(d.length) {
                Some(e) if e <= limit => {}
                _ => return Err(TransferError::SourceOutOfRange { index: i }),
            }
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a DescriptorList {
    type Item = &'a Descriptor;
    type IntoIter = std::slice::Iter<'a, Descriptor>;

    fn into_iter(self) -> Self::IntoIter {
        self.descs.iter()
    }
}

/// One descriptor per `(layer, K|V)` chunk of `block_index`, destinations
/// tiling `[0, block_bytes)` in layer-major, K-before-V order.
pub fn build_gather_descriptors(
    layout: &KVLayoutSpec,
    buf: &FragmentedBuffer,
    block_index: usize,
) -> TransferResult<DescriptorList> {
    buf.check(layout)?;
    if block_index >= buf.blocks {
        return Err(TransferError::BlockOutOfRange { block: block_index, blocks: buf.blocks });
    }
    let chunk = layout.chunk_bytes() as u64;
    let mut list = DescriptorList::new(Vec::with_capacity(layout.chunks_per_block()));
    for layer in 0..layout.n_layers {
        for kv in 0..2 {
            list.push(Descriptor::new(
                buf.chunk_offset(block_index, layer, kv) as u64,
                layout.chunk_in_block(layer, kv) as u64,
                chunk,
            ));
        }
    }
    Ok(list)
}

/// Reverse of [`build_gather_descriptors`]: block bytes back into the arena.
pub fn build_scatter_descriptors(
    layout: &KVLayoutSpec,
    buf: &FragmentedBuffer,
    block_index: usize,
) -> TransferResult<DescriptorList> {
    Ok(build_gather_descriptors(layout, buf, block_index)?.reversed())
}

/// Sorted token positions per `(layer, head)`; positions index the
/// concatenation of the buffer's blocks. A selection applies to K and V alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseSelection {
    n_kv_heads: usize,
    tokens: Vec<Vec<u32>>,
}

impl SparseSelection {
    pub fn empty(layout: &KVLayoutSpec) -> Self {
        Self { n_kv_heads: layout.n_kv_heads, tokens: vec![Vec::new(); layout.n_layers * layout.n_kv_heads] }
    }

    /// The same positions for every layer and head.
    pub fn uniform(layout: &KVLayoutSpec, tokens: &[u32]) -> Self {
        let mut s = Self::empty(layout);
        for l in 0..layout.n_layers {
            for h in 0..layout.n_kv_heads {
                s.set(l, h, tokens.to_vec());
            }
        }
        s
    }

    pub fn set(&mut self, layer: usize, head: usize, mut tokens: Vec<u32>) {
        tokens.sort_unstable();
        tokens.dedup();
        self.tokens[layer * self.n_kv_heads + head] = tokens;
    }

    pub fn get(&self, layer: usize, head: usize) -> &[u32] {
        &self.tokens[layer * self.n_kv_heads + head]
    }

    pub fn selected(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    fn n_layers(&self) -> usize {
        self.tokens.len() / self.n_kv_heads.max(1)
    }
}

/// Descriptors for reading the selected tokens from pool blocks into the
/// arena, one per `(layer, K|V, head, contiguous run)`. Runs are merged when
/// both sides are adjacent, so a fully selected block collapses to one
/// descriptor per chunk.
pub fn build_sparse_descriptors(
    layout: &KVLayoutSpec,
    buf: &FragmentedBuffer,
    sel: &SparseSelection,
) -> TransferResult<DescriptorList> {
    buf.check(layout)?;
    if sel.n_kv_heads != layout.n_kv_heads || sel.n_layers() != layout.n_layers {
        return Err(TransferError::LayoutMismatch);
    }
    let t_per_block = layout.tokens_per_block;
    let limit = t_per_block * buf.blocks;
    let unit = layout.per_token_per_head_bytes() as u64;
    let block_bytes = layout.block_bytes() as u64;
    let mut descs: Vec<Descriptor> = Vec::new();
    for layer in 0..layout.n_layers {
        for kv in 0..2 {
            for head in 0..layout.n_kv_heads {
                for &t in sel.get(layer, head) {
                    let t = t as usize;
                    if t >= limit {
                        return Err(TransferError::TokenOutOfRange { token: t as u32, limit });
                    }
                    let (block, tok) = (t / t_per_block, t % t_per_block);
                    let inner = layout.in_chunk_offset(head, tok) as u64;
                    let src = block as u64 * block_bytes + layout.chunk_in_block(layer, kv) as u64 + inner;
                    let dst = buf.chunk_offset(block, layer, kv) as u64 + inner;
                    if let Some(last) = descs.last_mut() {
                        let same_block = last.src_offset / block_bytes == src / block_bytes;
                        if same_block && last.src_offset + last.length == src && last.dst_offset + last.length == dst {
                            last.length += unit;
                            continue;
                        }
                    }
                    descs.push(Descriptor::new(src, dst, unit));
                }
            }
        }
    }
    Ok(DescriptorList::new(descs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CopyMethod {
    DirectSmall,
    BulkEngine,
    CustomKernelPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Cpu,
    DeviceRead,
    DeviceWrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyThresholds {
    /// CPU copies strictly below this use direct loads and stores.
    pub cpu_direct_below: u64,
    /// Device reads strictly below this use the custom kernel.
    pub device_kernel_below: u64,
}

impl Default for CopyThresholds {
    fn default() -> Self {
        Self { cpu_direct_below: 4 * 1024, device_kernel_below: 24 * 1024 }
    }
}

pub fn select_copy_method(size_bytes: u64, direction: Direction, t: &CopyThresholds) -> CopyMethod {
    match direction {
        Direction::Cpu if size_bytes < t.cpu_direct_below => CopyMethod::DirectSmall,
        Direction::DeviceRead if size_bytes < t.device_kernel_below => CopyMethod::CustomKernelPath,
        _ => CopyMethod::BulkEngine,
    }
}

/// Counters for everything a [`TransferEngine`] moved. `bytes_moved` counts
/// every hop, so a two-hop copy counts its payload twice.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferStats {
    pub bytes_moved: u64,
    pub invocations: u64,
    pub descriptors: u64,
    pub direct_small: u64,
    pub bulk_engine: u64,
    pub custom_kernel: u64,
}

#[derive(Debug, Default)]
pub struct TransferEngine {
    thresholds: CopyThresholds,
    stats: TransferStats,
}

impl TransferEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_thresholds(thresholds: CopyThresholds) -> Self {
        Self { thresholds, stats: TransferStats::default() }
    }

    pub fn thresholds(&self) -> &CopyThresholds {
        &self.thresholds
    }

    pub fn stats(&self) -> TransferStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = TransferStats::default();
    }

    fn account(&mut self, len: u64, dir: Direction) {
        match select_copy_method(len, dir, &self.thresholds) {
            CopyMethod::DirectSmall => self.stats.direct_small += 1,
            CopyMethod::BulkEngine => self.stats.bulk_engine += 1,
            CopyMethod::CustomKernelPath => self.stats.custom_kernel += 1,
        }
        self.stats.bytes_moved += len;
        self.stats.descriptors += 1;
    }

    fn check_block_list(list: &DescriptorList, block: PoolAddress) -> TransferResult<()> {
        let total = list.total_bytes();
        if total != block.length {
            return Err(TransferError::LengthMismatch { descriptors: total, target: block.length });
        }
        Ok(())
    }

    /// Gathers arena chunks into one pool block with cache-bypassing device
    /// writes, executing the whole list in a single invocation.
    pub fn gather_write(
        &mut self,
        session: &mut CoherentSession,
        src: &[u8],
        list: &DescriptorList,
        block: PoolAddress,
    ) -> TransferResult<()> {
        Self::check_block_list(list, block)?;
        list.check_destinations(block.length)?;
        list.check_sources(src.len() as u64)?;
        self.stats.invocations += 1;
        for d in list {
            let s = d.src_offset as usize;
            session.device_write(block.offset + d.dst_offset, &src[s..s + d.length as usize])?;
            self.account(d.length, Direction::DeviceWrite);
        }
        Ok(())
    }

    /// Scatters one pool block into the arena with fresh device reads.
    pub fn scatter_read(
        &mut self,
        session: &mut CoherentSession,
        block: PoolAddress,
        list: &DescriptorList,
        dst: &mut [u8],
    ) -> TransferResult<()> {
        Self::check_block_list(list, block)?;
        list.check_sources(block.length)?;
        list.check_destinations(dst.len() as u64)?;
        self.stats.invocations += 1;
        for d in list {
            let o = d.dst_offset as usize;
            session.device_read(block.offset + d.src_offset, &mut dst[o..o + d.length as usize])?;
            self.account(d.length, Direction::DeviceRead);
        }
        Ok(())
    }

    /// Executes a sparse list against `blocks` (equal-sized) in one invocation.
    pub fn sparse_read(
        &mut self,
        session: &mut CoherentSession,
        blocks: &[PoolAddress],
        list: &DescriptorList,
        dst: &mut [u8],
    ) -> TransferResult<()> {
        let block_bytes = blocks.first().map_or(0, |b| b.length);
        list.check_destinations(dst.len() as u64)?;
        for (i, d) in list.iter().enumerate() {
            let b = d.src_offset.checked_div(block_bytes).unwrap_or(u64::MAX) as usize;
            let bad = b >= blocks.len()
                || blocks[b].length != block_bytes
                || (d.src_offset % block_bytes) + d.length > block_bytes;
            if bad {
                return Err(TransferError::SourceOutOfRange { index: i });
            }
        }
        self.stats.invocations += 1;
        for d in list {
            let b = &blocks[(d.src_offset / block_bytes) as usize];
            let o = d.dst_offset as usize;
            session.device_read(b.offset + d.src_offset % block_bytes, &mut dst[o..o + d.length as usize])?;
            self.account(d.length, Direction::DeviceRead);
        }
        Ok(())
    }

    /// Baseline that issues one invocation per descriptor.
    pub fn sparse_read_per_descriptor(
        &mut self,
        session: &mut CoherentSession,
        blocks: &[PoolAddress],
        list: &DescriptorList,
        dst: &mut [u8],
    ) -> TransferResult<()> {
        for d in list {
            self.sparse_read(session, blocks, &DescriptorList::new(vec![*d]), dst)?;
        }
        Ok(())
    }

    /// Two-hop baseline: chunks are copied into `staging`, then the staged
    /// block is written to the pool.
    pub fn staged_gather_write(
        &mut self,
        session: &mut CoherentSession,
        src: &[u8],
        staging: &mut [u8],
        list: &DescriptorList,
        block: PoolAddress,
    ) -> TransferResult<()> {
        Self::check_block_list(list, block)?;
        let need = block.length as usize;
        if staging.len() < need {
            return Err(TransferError::StagingTooSmall { have: staging.len(), need });
        }
        list.check_destinations(block.length)?;
        list.check_sources(src.len() as u64)?;
        self.stats.invocations += 1;
        for d in list {
            let (s, o, n) = (d.src_offset as usize, d.dst_offset as usize, d.length as usize);
            staging[o..o + n].copy_from_slice(&src[s..s + n]);
            self.account(d.length, Direction::Cpu);
        }
        session.bypass_write(block.offset, &staging[..need])?;
        self.account(block.length, Direction::Cpu);
        Ok(())
    }

    /// Two-hop baseline: the block is read fresh into `staging`, then copied
    /// out to the arena.
    pub fn staged_scatter_read(
        &mut self,
        session: &mut CoherentSession,
        block: PoolAddress,
        staging: &mut [u8],
        list: &DescriptorList,
        dst: &mut [u8],
    ) -> TransferResult<()> {
        Self::check_block_list(list, block)?;
        let need = block.length as usize;
        if staging.len() < need {
            return Err(TransferError::StagingTooSmall { have: staging.len(), need });
        }
        list.check_sources(block.length)?;
        list.check_destinations(dst.len() as u64)?;
        self.stats.invocations += 1;
        session.read_fresh(block.offset, &mut staging[..need])?;
        self.account(block.length, Direction::Cpu);
        for d in list {
            let (s, o, n) = (d.src_offset as usize, d.dst_offset as usize, d.length as usize);
            dst[o..o + n].copy_from_slice(&staging[s..s + n]);
            self.account(d.length, Direction::Cpu);
        }
        Ok(())
    }
}
