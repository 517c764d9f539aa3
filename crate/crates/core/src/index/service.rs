//! The index served over a shared-memory RPC channel.
//!
//! Request frame (64 bytes, little-endian):
//!
//! ```text
//! [op:1][hash:16][arg:8][len:4][reserved:35]
//! ```
//!
//! `arg` carries the block address for INSERT, the ticket for COMPLETE, the
//! byte count for EVICT and the cursor for DUMP.
//!
//! Response frame (64 bytes):
//!
//! ```text
//! [status:1][state:1][pad:2][len:4][addr:8][aux:8][hash:16][ref_count:4][aux2:8][pad:12]
//! ```

use std::sync::Arc;

use serde::Serialize;

use super::{BlockHash, EntryState, IndexEntry, IndexError, KvIndex, Ticket};
use crate::pool::{Pool, PoolAddress};
use crate::rpc::{RpcClient, RpcError};

pub const FRAME_BYTES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[repr(u8)]
pub enum OpCode {
    Lookup = 1,
    Insert = 2,
    Complete = 3,
    /// Lookup that also pins the entry until RELEASE.
    Match = 4,
    Evict = 5,
    Release = 6,
    Stat = 7,
    Dump = 8,
}

impl OpCode {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Lookup,
            2 => Self::Insert,
            3 => Self::Complete,
            4 => Self::Match,
            5 => Self::Evict,
            6 => Self::Release,
            7 => Self::Stat,
            8 => Self::Dump,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    InFlight = 2,
    Exists = 3,
    BadTicket = 4,
    Partial = 5,
    BadRequest = 6,
    Failed = 7,
}

impl Status {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => Self::Ok,
            1 => Self::NotFound,
            2 => Self::InFlight,
            3 => Self::Exists,
            4 => Self::BadTicket,
            5 => Self::Partial,
            6 => Self::BadRequest,
            _ => Self::Failed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexRequest {
    pub op: OpCode,
    pub hash: BlockHash,
    pub arg: u64,
    pub len: u32,
}

impl IndexRequest {
    pub fn new(op: OpCode, hash: BlockHash, arg: u64, len: u32) -> Self {
        Self { op, hash, arg, len }
    }

    pub fn encode(&self) -> [u8; FRAME_BYTES] {
        let mut b = [0u8; FRAME_BYTES];
        b[0] = self.op as u8;
        b[1..17].copy_from_slice(&self.hash.to_le_bytes());
        b[17..25].copy_from_slice(&self.arg.to_le_bytes());
        b[25..29].copy_from_slice(&self.len.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() < 29 {
            return None;
        }
        Some(Self {
            op: OpCode::from_u8(b[0])?,
            hash: BlockHash::from_le_bytes(b[1..17].try_into().ok()?),
            arg: u64::from_le_bytes(b[17..25].try_into().ok()?),
            len: u32::from_le_bytes(b[25..29].try_into().ok()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexResponse {
    pub status: Status,
    pub ready: bool,
    pub len: u32,
    pub addr: u64,
    pub aux: u64,
    pub hash: BlockHash,
    pub ref_count: u32,
    pub aux2: u64,
}

impl IndexResponse {
    fn status(status: Status) -> Self {
        Self { status, ready: false, len: 0, addr: 0, aux: 0, hash: BlockHash(0), ref_count: 0, aux2: 0 }
    }

    fn entry(e: &IndexEntry) -> Self {
        Self {
            status: Status::Ok,
            ready: e.state == EntryState::Ready,
            len: e.addr.length as u32,
            addr: e.addr.offset,
            aux: e.last_access,
            hash: e.hash,
            ref_count: e.ref_count,
            aux2: 0,
        }
    }

    pub fn encode(&self, b: &mut [u8]) -> usize {
        b[..FRAME_BYTES].fill(0);
        b[0] = self.status as u8;
        b[1] = self.ready as u8;
        b[4..8].copy_from_slice(&self.len.to_le_bytes());
        b[8..16].copy_from_slice(&self.addr.to_le_bytes());
        b[16..24].copy_from_slice(&self.aux.to_le_bytes());
        b[24..40].copy_from_slice(&self.hash.to_le_bytes());
        b[40..44].copy_from_slice(&self.ref_count.to_le_bytes());
        b[44..52].copy_from_slice(&self.aux2.to_le_bytes());
        FRAME_BYTES
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() < 52 {
            return None;
        }
        Some(Self {
            status: Status::from_u8(b[0]),
            ready: b[1] != 0,
            len: u32::from_le_bytes(b[4..8].try_into().ok()?),
            addr: u64::from_le_bytes(b[8..16].try_into().ok()?),
            aux: u64::from_le_bytes(b[16..24].try_into().ok()?),
            hash: BlockHash::from_le_bytes(b[24..40].try_into().ok()?),
            ref_count: u32::from_le_bytes(b[40..44].try_into().ok()?),
            aux2: u64::from_le_bytes(b[44..52].try_into().ok()?),
        })
    }

    fn addr(&self) -> PoolAddress {
        PoolAddress::new(self.addr, self.len as u64)
    }
}

fn error_status(e: &IndexError) -> Status {
    match e {
        IndexError::InFlight(_) => Status::InFlight,
        IndexError::AlreadyPresent(_) => Status::Exists,
        IndexError::BadTicket(_) => Status::BadTicket,
        IndexError::NotFound(_) | IndexError::NotPinned(_) => Status::NotFound,
        IndexError::EmptyRequest | IndexError::WrongBlockLength { .. } => Status::BadRequest,
        IndexError::Pool(_) => Status::Failed,
    }
}

/// Metadata server state: owns the index and answers frames.
pub struct IndexService {
    index: KvIndex,
}

impl IndexService {
    pub fn new(index: KvIndex) -> Self {
        Self { index }
    }

    pub fn index(&self) -> &KvIndex {
        &self.index
    }

    pub fn index_mut(&mut self) -> &mut KvIndex {
        &mut self.index
    }

    /// RPC handler body.
    pub fn handle(&mut self, req: &[u8], resp: &mut [u8]) -> usize {
        let Some(r) = IndexRequest::decode(req) else {
            return IndexResponse::status(Status::BadRequest).encode(resp);
        };
        self.dispatch(r).encode(resp)
    }

    fn dispatch(&mut self, r: IndexRequest) -> IndexResponse {
        let ix = &mut self.index;
        match r.op {
            OpCode::Lookup => ix.lookup(r.hash).map_or(IndexResponse::status(Status::NotFound), |e| IndexResponse::entry(&e)),
            OpCode::Match => ix.pin(r.hash).map_or(IndexResponse::status(Status::NotFound), |e| IndexResponse::entry(&e)),
            OpCode::Insert => match ix.insert(r.hash, PoolAddress::new(r.arg, r.len as u64)) {
                Ok(t) => IndexResponse { aux: t.0, ..IndexResponse::status(Status::Ok) },
                Err(e) => IndexResponse::status(error_status(&e)),
            },
            OpCode::Complete => match ix.complete(Ticket(r.arg)) {
                Ok(e) => IndexResponse::entry(&e),
                Err(e) => IndexResponse::status(error_status(&e)),
            },
            OpCode::Release => match ix.unpin(r.hash) {
                Ok(()) => IndexResponse::status(Status::Ok),
                Err(e) => IndexResponse::status(error_status(&e)),
            },
            OpCode::Evict => match ix.evict(r.arg) {
                Ok(out) => IndexResponse {
                    aux: out.freed_bytes,
                    aux2: out.freed.len() as u64,
                    ..IndexResponse::status(if out.satisfied { Status::Ok } else { Status::Partial })
                },
                Err(e) => IndexResponse::status(error_status(&e)),
            },
            OpCode::Stat => {
                let s = ix.stats();
                IndexResponse {
                    len: s.writing as u32,
                    addr: s.entries,
                    aux: s.live_bytes,
                    aux2: s.free_bytes,
                    ref_count: s.pinned as u32,
                    ..IndexResponse::status(Status::Ok)
                }
            }
            OpCode::Dump => {
                // O(n) per call; dump is a debugging aid
                let entries = ix.entries();
                match entries.get(r.arg as usize) {
                    Some(e) => IndexResponse { aux2: entries.len() as u64, ..IndexResponse::entry(e) },
                    None => IndexResponse { aux2: entries.len() as u64, ..IndexResponse::status(Status::NotFound) },
                }
            }
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IndexClientError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("malformed response")]
    Malformed,
    #[error("insert already in flight")]
    InFlight,
    #[error("block already cached")]
    Exists,
    #[error("unknown ticket")]
    BadTicket,
    #[error("not found")]
    NotFound,
    #[error("server error: {0:?}")]
    Server(Status),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RemoteStats {
    pub entries: u64,
    pub writing: u64,
    pub pinned: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
}

/// Stateless client of a remote index.
pub struct IndexClient {
    rpc: RpcClient,
    block_tokens: usize,
}

impl IndexClient {
    pub fn attach(pool: Arc<Pool>, channel: u32, block_tokens: usize) -> Result<Self, IndexClientError> {
        Ok(Self { rpc: RpcClient::attach(pool, channel)?, block_tokens })
    }

    pub fn new(rpc: RpcClient, block_tokens: usize) -> Self {
        Self { rpc, block_tokens }
    }

    fn roundtrip(&mut self, req: IndexRequest) -> Result<IndexResponse, IndexClientError> {
        let raw = self.rpc.call(&req.encode())?;
        IndexResponse::decode(&raw).ok_or(IndexClientError::Malformed)
    }

    fn check(r: IndexResponse) -> Result<IndexResponse, IndexClientError> {
        match r.status {
            Status::Ok | Status::Partial => Ok(r),
            Status::NotFound => Err(IndexClientError::NotFound),
            Status::InFlight => Err(IndexClientError::InFlight),
            Status::Exists => Err(IndexClientError::Exists),
            Status::BadTicket => Err(IndexClientError::BadTicket),
            s => Err(IndexClientError::Server(s)),
        }
    }

    pub fn lookup(&mut self, hash: BlockHash) -> Result<Option<PoolAddress>, IndexClientError> {
        match Self::check(self.roundtrip(IndexRequest::new(OpCode::Lookup, hash, 0, 0))?) {
            Ok(r) => Ok(Some(r.addr())),
            Err(IndexClientError::NotFound) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn insert(&mut self, hash: BlockHash, addr: PoolAddress) -> Result<Ticket, IndexClientError> {
        let r = Self::check(self.roundtrip(IndexRequest::new(OpCode::Insert, hash, addr.offset, addr.length as u32))?)?;
        Ok(Ticket(r.aux))
    }

    pub fn complete(&mut self, ticket: Ticket) -> Result<PoolAddress, IndexClientError> {
        let r = Self::check(self.roundtrip(IndexRequest::new(OpCode::Complete, BlockHash(0), ticket.0, 0))?)?;
        Ok(r.addr())
    }

    /// Pins a ready entry; pair with [`IndexClient::release`].
    pub fn acquire(&mut self, hash: BlockHash) -> Result<Option<PoolAddress>, IndexClientError> {
        match Self::check(self.roundtrip(IndexRequest::new(OpCode::Match, hash, 0, 0))?) {
            Ok(r) => Ok(Some(r.addr())),
            Err(IndexClientError::NotFound) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn release(&mut self, hash: BlockHash) -> Result<(), IndexClientError> {
        Self::check(self.roundtrip(IndexRequest::new(OpCode::Release, hash, 0, 0))?).map(|_| ())
    }

    /// Walks the prompt's chained hashes until the first miss.
    pub fn match_prefix(&mut self, tokens: &[u32]) -> Result<Vec<(BlockHash, PoolAddress)>, IndexClientError> {
        let mut out = Vec::new();
        for h in super::prompt_hashes(tokens, self.block_tokens) {
            match self.lookup(h)? {
                Some(a) => out.push((h, a)),
                None => break,
            }
        }
        Ok(out)
    }

    /// Returns `(freed_bytes, freed_blocks, satisfied)`.
    pub fn evict(&mut self, bytes: u64) -> Result<(u64, u64, bool), IndexClientError> {
        let r = Self::check(self.roundtrip(IndexRequest::new(OpCode::Evict, BlockHash(0), bytes, 0))?)?;
        Ok((r.aux, r.aux2, r.status == Status::Ok))
    }

    pub fn stat(&mut self) -> Result<RemoteStats, IndexClientError> {
        let r = Self::check(self.roundtrip(IndexRequest::new(OpCode::Stat, BlockHash(0), 0, 0))?)?;
        Ok(RemoteStats { entries: r.addr, writing: r.len as u64, pinned: r.ref_count as u64, live_bytes: r.aux, free_bytes: r.aux2 })
    }

    /// Every entry as `(hash, addr, ready, ref_count)`.
    pub fn dump(&mut self) -> Result<Vec<(BlockHash, PoolAddress, bool, u32)>, IndexClientError> {
        let mut out = Vec::new();
        let mut cursor = 0u64;
        loop {
            let r = self.roundtrip(IndexRequest::new(OpCode::Dump, BlockHash(0), cursor, 0))?;
            if r.status != Status::Ok {
                break;
            }
            out.push((r.hash, r.addr(), r.ready, r.ref_count));
            cursor += 1;
        }
        Ok(out)
    }
}
