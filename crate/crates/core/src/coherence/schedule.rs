//! Two-host schedule exploration for the writer/reader coherence protocols.
//!
//! Each watched line has one owning host (the only writer). A schedule is a
//! sequence of host operations; every checked read is compared against the
//! latest value written to that line in schedule order.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{CoherentSession, SessionMode};
use crate::pool::{Pool, PoolConfig, LINE_BYTES};

pub const HOSTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpKind {
    /// Writer, compliant: cache-bypassing store.
    BypassWrite,
    /// Writer, compliant: ordinary store immediately followed by a flush.
    CachedWriteFlush,
    /// Writer, compliant: ordinary store to a line this host marked uncacheable.
    UncachedStore,
    /// Writer, non-compliant: ordinary store left in the cache.
    CachedWrite,
    /// Reader, compliant: invalidate then load.
    ReadFresh,
    /// Reader, compliant: plain load of a line this host marked uncacheable.
    UncachedLoad,
    /// Reader, non-compliant: plain load (checked).
    PlainRead,
    /// Unchecked plain load; only perturbs cache state.
    Touch,
    /// Unchecked invalidate.
    Invalidate,
}

impl OpKind {
    fn is_write(self) -> bool {
        matches!(self, Self::BypassWrite | Self::CachedWriteFlush | Self::UncachedStore | Self::CachedWrite)
    }

    fn is_checked_read(self) -> bool {
        matches!(self, Self::ReadFresh | Self::UncachedLoad | Self::PlainRead)
    }

    fn is_compliant(self) -> bool {
        !matches!(self, Self::CachedWrite | Self::PlainRead)
    }

    fn needs_uncacheable(self) -> bool {
        matches!(self, Self::UncachedStore | Self::UncachedLoad)
    }

    const ALL: [OpKind; 9] = [
        Self::BypassWrite,
        Self::CachedWriteFlush,
        Self::UncachedStore,
        Self::CachedWrite,
        Self::ReadFresh,
        Self::UncachedLoad,
        Self::PlainRead,
        Self::Touch,
        Self::Invalidate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Op {
    pub host: usize,
    pub kind: OpKind,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub lines: usize,
    pub cache_lines: usize,
    /// `uncacheable[host][line]`
    pub uncacheable: Vec<Vec<bool>>,
    pub ops: Vec<Op>,
}

impl Schedule {
    pub fn owner(line: usize) -> usize {
        line % HOSTS
    }

    fn op_valid(&self, op: &Op) -> bool {
        if op.kind.is_write() && Self::owner(op.line) != op.host {
            return false;
        }
        if op.kind.needs_uncacheable() && !self.uncacheable[op.host][op.line] {
            return false;
        }
        // an ordinary store into an uncacheable line is the UncachedStore case
        if matches!(op.kind, OpKind::CachedWrite | OpKind::CachedWriteFlush | OpKind::PlainRead)
            && self.uncacheable[op.host][op.line]
        {
            return false;
        }
        true
    }

    pub fn is_compliant(&self) -> bool {
        self.ops.iter().all(|o| o.kind.is_compliant())
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cache={} uc={:?} ops=[", self.cache_lines, self.uncacheable)?;
        for (i, o) in self.ops.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "h{}:{:?}(L{})", o.host, o.kind, o.line)?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaleRead {
    pub op_index: usize,
    pub expected: u64,
    pub observed: u64,
}

/// Runs schedules against a private in-memory pool.
pub struct ScheduleRunner {
    pool: Arc<Pool>,
    break_read_fresh: bool,
}

const BASE: u64 = 0;

fn pattern(v: u64) -> [u8; LINE_BYTES as usize] {
    let mut line = [0u8; LINE_BYTES as usize];
    for c in line.chunks_mut(8) {
        c.copy_from_slice(&v.to_le_bytes());
    }
    line
}

fn decode(line: &[u8]) -> u64 {
    // a torn line would decode inconsistently; report the first word and
    // flag a mismatch if any word disagrees
    let first = u64::from_le_bytes(line[..8].try_into().unwrap());
    if line.chunks(8).all(|c| u64::from_le_bytes(c.try_into().unwrap()) == first) {
        first
    } else {
        u64::MAX
    }
}

impl ScheduleRunner {
    pub fn new(break_read_fresh: bool) -> Self {
        let cfg = PoolConfig::new("", 64 * 1024, 1, 4096).with_chunk(4096);
        let pool = Arc::new(Pool::create_in_memory(cfg).expect("small in-memory pool"));
        pool.set_accounting(false);
        Self { pool, break_read_fresh }
    }

    /// Executes one schedule and returns every stale checked read.
    pub fn run(&self, s: &Schedule) -> Vec<StaleRead> {
        let zero = [0u8; LINE_BYTES as usize];
        for l in 0..s.lines {
            self.pool.write(BASE + l as u64 * LINE_BYTES, &zero).unwrap();
        }
        let mode = SessionMode { ddio_disabled: true, break_read_fresh: self.break_read_fresh };
        let mut hosts: Vec<CoherentSession> = (0..HOSTS)
            .map(|_| CoherentSession::with_cache(self.pool.clone(), s.cache_lines, mode))
            .collect();
        for (h, sess) in hosts.iter_mut().enumerate() {
            for l in 0..s.lines {
                if s.uncacheable[h][l] {
                    sess.set_region_uncacheable(BASE + l as u64 * LINE_BYTES, LINE_BYTES).unwrap();
                }
            }
        }
        let mut latest = vec![0u64; s.lines];
        let mut next_value = 1u64;
        let mut stale = Vec::new();
        let mut buf = [0u8; LINE_BYTES as usize];
        for (i, op) in s.ops.iter().enumerate() {
            let sess = &mut hosts[op.host];
            let addr = BASE + op.line as u64 * LINE_BYTES;
            match op.kind {
                OpKind::BypassWrite | OpKind::CachedWriteFlush | OpKind::UncachedStore | OpKind::CachedWrite => {
                    let v = next_value;
                    next_value += 1;
                    let data = pattern(v);
                    match op.kind {
                        OpKind::BypassWrite => sess.bypass_write(addr, &data).unwrap(),
                        OpKind::CachedWriteFlush => {
                            sess.cached_write(addr, &data).unwrap();
                            sess.flush(addr, LINE_BYTES).unwrap();
                        }
                        _ => sess.cached_write(addr, &data).unwrap(),
                    }
                    latest[op.line] = v;
                }
                OpKind::ReadFresh => sess.read_fresh(addr, &mut buf).unwrap(),
                OpKind::UncachedLoad | OpKind::PlainRead | OpKind::Touch => sess.read(addr, &mut buf).unwrap(),
                OpKind::Invalidate => sess.invalidate(addr, LINE_BYTES).unwrap(),
            }
            if op.kind.is_checked_read() {
                let observed = decode(&buf);
                if observed != latest[op.line] {
                    stale.push(StaleRead { op_index: i, expected: latest[op.line], observed });
                }
            }
        }
        stale
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ExploreReport {
    pub schedules: u64,
    pub checked_reads: u64,
    pub stale_reads: u64,
    pub stale_schedules: u64,
    pub first_stale: Option<String>,
}

impl ExploreReport {
    fn record(&mut self, s: &Schedule, stale: &[StaleRead]) {
        self.schedules += 1;
        self.checked_reads += s.ops.iter().filter(|o| o.kind.is_checked_read()).count() as u64;
        if !stale.is_empty() {
            self.stale_reads += stale.len() as u64;
            self.stale_schedules += 1;
            if self.first_stale.is_none() {
                self.first_stale = Some(format!("{s} stale={stale:?}"));
            }
        }
    }
}

/// Which operations a generated schedule may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpSet {
    Compliant,
    All,
}

impl OpSet {
    fn kinds(self) -> Vec<OpKind> {
        OpKind::ALL
            .into_iter()
            .filter(|k| self == OpSet::All || k.is_compliant())
            .collect()
    }
}

/// Random schedules over `lines` watched lines with small caches so that
/// eviction interleaves with the protocol.
pub fn explore_random(
    runner: &ScheduleRunner,
    schedules: u64,
    seed: u64,
    lines: usize,
    max_ops: usize,
    set: OpSet,
) -> ExploreReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = set.kinds();
    let mut report = ExploreReport::default();
    for _ in 0..schedules {
        let mut s = Schedule {
            lines,
            cache_lines: rng.random_range(1..=lines + 1),
            uncacheable: (0..HOSTS)
                .map(|_| (0..lines).map(|_| rng.random_bool(0.25)).collect())
                .collect(),
            ops: Vec::with_capacity(max_ops),
        };
        let n = rng.random_range(1..=max_ops);
        while s.ops.len() < n {
            let op = Op {
                host: rng.random_range(0..HOSTS),
                kind: kinds[rng.random_range(0..kinds.len())],
                line: rng.random_range(0..lines),
            };
            if s.op_valid(&op) {
                s.ops.push(op);
            }
        }
        let stale = runner.run(&s);
        report.record(&s, &stale);
    }
    report
}

/// Every schedule of `len` operations over two lines (one per host) and every
/// per-host uncacheable configuration.
pub fn explore_exhaustive(runner: &ScheduleRunner, len: usize, set: OpSet) -> ExploreReport {
    const LINES: usize = 2;
    let kinds = set.kinds();
    let mut report = ExploreReport::default();
    for uc_mask in 0u32..(1 << (HOSTS * LINES)) {
        let uncacheable: Vec<Vec<bool>> = (0..HOSTS)
            .map(|h| (0..LINES).map(|l| uc_mask & (1 << (h * LINES + l)) != 0).collect())
            .collect();
        let template = Schedule { lines: LINES, cache_lines: 2, uncacheable, ops: Vec::new() };
        let choices: Vec<Op> = (0..HOSTS)
            .flat_map(|host| {
                kinds
                    .iter()
                    .flat_map(move |&kind| (0..LINES).map(move |line| Op { host, kind, line }))
            })
            .filter(|op| template.op_valid(op))
            .collect();
        let total = choices.len().pow(len as u32);
        for mut code in 0..total {
            let mut s = template.clone();
            for _ in 0..len {
                s.ops.push(choices[code % choices.len()]);
                code /= choices.len();
            }
            let stale = runner.run(&s);
            report.record(&s, &stale);
        }
    }
    report
}

/// The canonical hazard: a remote host holds a line in its cache while the
/// owner publishes an update.
pub fn stale_demo_schedule() -> Schedule {
    Schedule {
        lines: 2,
        cache_lines: 4,
        uncacheable: vec![vec![false; 2]; HOSTS],
        ops: vec![
            Op { host: 1, kind: OpKind::PlainRead, line: 0 },
            Op { host: 0, kind: OpKind::CachedWrite, line: 0 },
            Op { host: 1, kind: OpKind::PlainRead, line: 0 },
            Op { host: 0, kind: OpKind::BypassWrite, line: 0 },
            Op { host: 1, kind: OpKind::PlainRead, line: 0 },
            Op { host: 1, kind: OpKind::ReadFresh, line: 0 },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_schedule_shows_stale_then_fresh() {
        let r = ScheduleRunner::new(false);
        let stale = r.run(&stale_demo_schedule());
        // both plain reads after writes are stale; the fresh read is not
        assert_eq!(stale.iter().map(|s| s.op_index).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn exhaustive_compliant_is_sound() {
        let r = ScheduleRunner::new(false);
        let rep = explore_exhaustive(&r, 3, OpSet::Compliant);
        assert!(rep.schedules > 1000);
        assert_eq!(rep.stale_reads, 0, "{:?}", rep.first_stale);
    }

    #[test]
    fn exhaustive_all_ops_finds_hazard() {
        let r = ScheduleRunner::new(false);
        let rep = explore_exhaustive(&r, 3, OpSet::All);
        assert!(rep.stale_schedules > 0);
    }

    #[test]
    fn broken_read_fresh_is_caught() {
        let r = ScheduleRunner::new(true);
        let rep = explore_exhaustive(&r, 3, OpSet::Compliant);
        assert!(rep.stale_reads > 0);
    }

    #[test]
    fn random_compliant_small_run() {
        let r = ScheduleRunner::new(false);
        let rep = explore_random(&r, 2000, 7, 4, 16, OpSet::Compliant);
        assert_eq!(rep.stale_reads, 0, "{:?}", rep.first_stale);
        assert!(rep.checked_reads > 0);
    }

    #[test]
    fn invalid_ops_are_filtered() {
        let s = Schedule { lines: 2, cache_lines: 1, uncacheable: vec![vec![true, false], vec![false, false]], ops: vec![] };
        assert!(!s.op_valid(&Op { host: 1, kind: OpKind::BypassWrite, line: 0 }));
        assert!(!s.op_valid(&Op { host: 0, kind: OpKind::CachedWrite, line: 0 }));
        assert!(s.op_valid(&Op { host: 0, kind: OpKind::UncachedStore, line: 0 }));
        assert!(!s.op_valid(&Op { host: 1, kind: OpKind::UncachedLoad, line: 0 }));
    }
}
