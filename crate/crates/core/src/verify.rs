//! Self-check suites behind `poolkv verify`.
//!
//! Every suite is deterministic in its seed. A failing suite reports the seed
//! and the first counterexample so the run can be repeated.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{run_skew, SkewConfig};
use crate::coherence::schedule::{explore_exhaustive, explore_random, OpSet, ScheduleRunner};
use crate::coherence::{CoherentSession, SessionMode};
use crate::index::{KvIndex, DEFAULT_BLOCK_TOKENS};
use crate::pool::{Pool, PoolAddress, PoolConfig, MIB};
use crate::sched::{generate_trace, relabel_tokens, run_trace, CostModel, Policy, TraceConfig};
use crate::transfer::{
    build_gather_descriptors, build_scatter_descriptors, FragmentedBuffer, KVLayoutSpec, TransferEngine,
};
use crate::workers::{index_race_suite, rpc_nonce_suite, NonceSuiteConfig};

pub const OBLIVIOUS_MAX_MEAN: f64 = 1.15;
pub const LOCALITY_MIN_MAX_MEAN: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub break_read_fresh: bool,
    /// Binary used for worker processes; threads are used when absent.
    pub exe: Option<std::path::PathBuf>,
    /// Shrinks iteration counts for smoke runs.
    pub quick: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 1, break_read_fresh: false, exe: None, quick: false }
    }
}

impl VerifyConfig {
    fn scale(&self, full: u64, quick: u64) -> u64 {
        if self.quick {
            quick
        } else {
            full
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub seed: u64,
    pub elapsed_ms: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub suites: Vec<SuiteResult>,
}

impl VerifySummary {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed)
    }
}

fn timed(suite: &str, seed: u64, f: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteResult { suite: suite.into(), passed, seed, elapsed_ms: t.elapsed().as_millis() as u64, detail }
}

pub fn verify_all(cfg: &VerifyConfig) -> VerifySummary {
    let seed = cfg.seed;
    let suites = vec![
        timed("coherence", seed, || coherence_suite(cfg)),
        timed("rpc", seed, || rpc_suite(cfg)),
        timed("transfer", seed, || transfer_suite(cfg)),
        timed("index", seed, || index_suite(cfg)),
        timed("sched", seed, || sched_suite(cfg)),
        timed("interleave", seed, || interleave_suite(cfg)),
        timed("accounting", seed, || accounting_suite(cfg)),
    ];
    VerifySummary { suites }
}

pub fn coherence_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let runner = ScheduleRunner::new(cfg.break_read_fresh);
    let random = explore_random(&runner, cfg.scale(100_000, 2_000), cfg.seed, 4, 16, OpSet::Compliant);
    if random.stale_reads > 0 {
        return Err(format!("random compliant schedule read stale bytes: {}", random.first_stale.unwrap_or_default()));
    }
    let exhaustive = explore_exhaustive(&runner, 3, OpSet::Compliant);
    if exhaustive.stale_reads > 0 {
        return Err(format!(
            "exhaustive compliant schedule read stale bytes: {}",
            exhaustive.first_stale.unwrap_or_default()
        ));
    }
    let hazard = explore_exhaustive(&runner, 3, OpSet::All);
    if hazard.stale_schedules == 0 {
        return Err("no non-compliant schedule produced a stale read".into());
    }
    Ok(format!(
        "{} random + {} exhaustive compliant schedules clean; {} non-compliant schedules stale",
        random.schedules, exhaustive.schedules, hazard.stale_schedules
    ))
}

pub fn rpc_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let nc = NonceSuiteConfig {
        calls_per_client: cfg.scale(100_000, 2_000),
        seed: cfg.seed,
        break_read_fresh: cfg.break_read_fresh,
        timeout_ms: if cfg.break_read_fresh { 300 } else { 5_000 },
        ..NonceSuiteConfig::default()
    };
    let rep = rpc_nonce_suite(cfg.exe.as_deref(), &nc).map_err(|e| e.to_string())?;
    if rep.bijection_holds() {
        Ok(format!("{} calls, {} clients, {} ms", rep.expected_calls, rep.clients.len(), rep.elapsed_ms))
    } else {
        let ok: u64 = rep.clients.iter().map(|c| c.ok).sum();
        let mism: u64 = rep.clients.iter().map(|c| c.mismatches).sum();
        Err(format!(
            "bijection broken: ok {ok}/{}, mismatches {mism}, timeouts {}, server dup {}",
            rep.expected_calls,
            rep.timeouts(),
            rep.server_duplicates
        ))
    }
}

/// Reference serialization: walks a block in `(layer, K|V, head, token, byte)`
/// order straight from the buffer geometry.
pub fn reference_block_bytes(buf: &FragmentedBuffer, block: usize) -> Vec<u8> {
    let l = buf.layout();
    let row = l.head_dim * l.bytes_per_element;
    let mut out = Vec::with_capacity(l.block_bytes());
    for layer in 0..l.n_layers {
        for kv in 0..2 {
            let base = buf.region_base(layer, kv) + block * l.chunk_bytes();
            for head in 0..l.n_kv_heads {
                for tok in 0..l.tokens_per_block {
                    let at = base + (head * l.tokens_per_block + tok) * row;
                    out.extend_from_slice(&buf.arena()[at..at + row]);
                }
            }
        }
    }
    out
}

fn scratch_block(layout: &KVLayoutSpec) -> Result<(Arc<Pool>, PoolAddress), String> {
    let block = (layout.block_bytes() as u64).div_ceil(4096) * 4096;
    let bytes = (block * 2).div_ceil(MIB) * MIB;
    let pool = Pool::create_in_memory(PoolConfig::new("", bytes, 1, block).with_chunk(MIB)).map_err(|e| e.to_string())?;
    let pool = Arc::new(pool);
    let a = pool.alloc_block().map_err(|e| e.to_string())?;
    Ok((pool, PoolAddress::new(a.offset, layout.block_bytes() as u64)))
}

pub fn random_layout(rng: &mut ChaCha8Rng) -> KVLayoutSpec {
    let layers = rng.random_range(1..=64);
    let heads = rng.random_range(1..=16);
    let dim = 4 * rng.random_range(1..=16);
    let bpe = [1, 2, 4][rng.random_range(0..3)];
    let tokens = rng.random_range(1..=16);
    KVLayoutSpec::new("random", layers, heads, dim, bpe)
        .and_then(|l| l.with_tokens_per_block(tokens))
        .expect("generated layout is valid")
}

pub fn transfer_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let cases = cfg.scale(1000, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut engine = TransferEngine::new();
    for case in 0..cases {
        let layout = random_layout(&mut rng);
        let blocks = rng.random_range(1..=2);
        let block = rng.random_range(0..blocks);
        let data_seed: u64 = rng.random();
        let mut src = FragmentedBuffer::new(&layout, blocks, data_seed);
        src.fill_random(data_seed);
        let mut dst = FragmentedBuffer::new(&layout, blocks, data_seed ^ 1);
        let (pool, addr) = scratch_block(&layout)?;
        let mut writer = CoherentSession::new(pool.clone());
        let mode = SessionMode { break_read_fresh: cfg.break_read_fresh, ..SessionMode::default() };
        let mut reader = CoherentSession::with_cache(pool.clone(), 1 << 16, mode);
        // the reader holds stale lines of the block before the write lands
        reader.read_vec(addr.offset, addr.length as usize).map_err(|e| e.to_string())?;
        let g = build_gather_descriptors(&layout, &src, block).map_err(|e| e.to_string())?;
        let s = build_scatter_descriptors(&layout, &dst, block).map_err(|e| e.to_string())?;
        engine.gather_write(&mut writer, src.arena(), &g, addr).map_err(|e| e.to_string())?;
        let in_pool = pool.read_vec(addr.offset, addr.length).map_err(|e| e.to_string())?;
        let want = reference_block_bytes(&src, block);
        if in_pool != want {
            return Err(format!("case {case}: pool bytes differ from reference serializer ({layout:?})"));
        }
        engine.scatter_read(&mut reader, addr, &s, dst.arena_mut()).map_err(|e| e.to_string())?;
        if reference_block_bytes(&dst, block) != want {
            return Err(format!("case {case}: round trip differs ({layout:?}, data seed {data_seed})"));
        }
    }
    Ok(format!("{cases} round trips"))
}

pub fn index_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let bt = DEFAULT_BLOCK_TOKENS;
    let prompts = cfg.scale(10_000, 500) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = Pool::create_in_memory(PoolConfig::new("", 256 * MIB, 1, 64).with_chunk(MIB)).map_err(|e| e.to_string())?;
    let mut index = KvIndex::with_block_tokens(Arc::new(pool), bt);
    let stems: Vec<Vec<u32>> =
        (0..32).map(|_| (0..bt * rng.random_range(1..=6)).map(|_| rng.random_range(0..64)).collect()).collect();
    let make = |rng: &mut ChaCha8Rng| {
        let mut p = stems[rng.random_range(0..stems.len())].clone();
        let stem_len = rng.random_range(0..=p.len() / bt) * bt;
        p.truncate(stem_len);
        let extra = rng.random_range(0..4 * bt);
        p.extend((0..extra).map(|_| rng.random_range(0..64)));
        p
    };
    // brute-force oracle: every cached block as its full token prefix
    let mut cached: HashSet<Vec<u32>> = HashSet::new();
    for _ in 0..prompts {
        let p = make(&mut rng);
        let hashes = crate::index::prompt_hashes(&p, bt);
        for (i, h) in hashes.iter().enumerate() {
            if !rng.random_bool(0.8) {
                continue;
            }
            let prefix = p[..(i + 1) * bt].to_vec();
            if cached.contains(&prefix) {
                continue;
            }
            let addr = index.alloc_or_evict().map_err(|e| e.to_string())?;
            let t = index.insert(*h, addr).map_err(|e| e.to_string())?;
            index.complete(t).map_err(|e| e.to_string())?;
            cached.insert(prefix);
        }
    }
    for q in 0..prompts {
        let p = make(&mut rng);
        let expect = (1..=p.len() / bt).take_while(|&k| cached.contains(&p[..k * bt])).count();
        let got = index.match_prefix(&p).len();
        if got != expect {
            return Err(format!("query {q}: match_prefix {got} blocks, oracle {expect}"));
        }
    }
    let race = index_race_suite(cfg.exe.as_deref(), 4, cfg.scale(2_000, 200), cfg.seed).map_err(|e| e.to_string())?;
    if !race.single_winner() {
        return Err(format!("insert race: {} hashes, {} ready, not exactly one winner each", race.hashes, race.ready_entries));
    }
    Ok(format!("{prompts} prompts against trie oracle; {} racing hashes", race.hashes))
}

pub fn sched_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let cost = CostModel::default();
    let mut tc = TraceConfig::default();
    tc.tokens.seed = cfg.seed;
    if cfg.quick {
        tc.requests = 2_000;
    }
    let trace = generate_trace(&tc, &cost).map_err(|e| e.to_string())?;
    let obl = run_trace(&trace, Policy::Oblivious, tc.instances, &cost);
    let loc = run_trace(&trace, Policy::Locality, tc.instances, &cost);
    let o = obl.metrics.max_mean_outstanding;
    let l = loc.metrics.max_mean_outstanding;
    if o > OBLIVIOUS_MAX_MEAN {
        return Err(format!("oblivious max/mean {o:.3} > {OBLIVIOUS_MAX_MEAN}"));
    }
    if l < LOCALITY_MIN_MAX_MEAN {
        return Err(format!("locality max/mean {l:.3} < {LOCALITY_MIN_MAX_MEAN}"));
    }
    let relabeled = relabel_tokens(&trace, tc.tokens.vocab, cfg.seed ^ 0x5eed);
    if run_trace(&relabeled, Policy::Oblivious, tc.instances, &cost).assignments != obl.assignments {
        return Err("oblivious assignments changed under token relabeling".into());
    }
    Ok(format!("oblivious {o:.3}, locality {l:.3}"))
}

pub fn interleave_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let pc = PoolConfig::new("", 64 * MIB, 4, 4096).with_chunk(2 * MIB);
    let pool = Pool::create_in_memory(pc).map_err(|e| e.to_string())?;
    pool.set_accounting(true);
    let data = vec![0xabu8; MIB as usize];
    for i in 0..64 {
        pool.write(i * MIB, &data).map_err(|e| e.to_string())?;
    }
    let counts = pool.device_load_report();
    if counts != vec![16 * MIB; 4] {
        return Err(format!("contiguous write counters {counts:?}"));
    }
    let skew = run_skew(&SkewConfig {
        interleave: false,
        seed: cfg.seed,
        ops_per_thread: cfg.scale(20_000, 2_000),
        ..SkewConfig::default()
    })
    .map_err(|e| e.to_string())?;
    if skew.max_share <= 0.5 {
        return Err(format!("skewed writes without interleaving: max share {:.3}", skew.max_share));
    }
    Ok(format!("uniform 4x16 MiB; skewed max share {:.3}", skew.max_share))
}

pub fn accounting_suite(cfg: &VerifyConfig) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.scale(50, 5) {
        let layout = random_layout(&mut rng);
        let mut src = FragmentedBuffer::new(&layout, 1, rng.random());
        src.fill_random(rng.random());
        let (pool, addr) = scratch_block(&layout)?;
        let mut s = CoherentSession::new(pool);
        let g = build_gather_descriptors(&layout, &src, 0).map_err(|e| e.to_string())?;
        let sum = g.total_bytes();
        let mut direct = TransferEngine::new();
        direct.gather_write(&mut s, src.arena(), &g, addr).map_err(|e| e.to_string())?;
        let mut staged = TransferEngine::new();
        let mut staging = vec![0u8; layout.block_bytes()];
        staged.staged_gather_write(&mut s, src.arena(), &mut staging, &g, addr).map_err(|e| e.to_string())?;
        if direct.stats().bytes_moved != sum || staged.stats().bytes_moved != 2 * sum {
            return Err(format!(
                "{layout:?}: direct {} staged {} for {sum} descriptor bytes",
                direct.stats().bytes_moved,
                staged.stats().bytes_moved
            ));
        }
    }
    Ok("direct = sum of lengths, staged = 2x".into())
}
