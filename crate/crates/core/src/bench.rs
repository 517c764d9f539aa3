//! Desk-scale microbenchmarks and their reports.
//!
//! Report CSV columns, in order: `benchmark,series,metric,value,unit`.
//! JSON reports carry the same rows plus a config echo and an environment
//! fingerprint. Files are never overwritten: each run adds a numbered JSON
//! file and appends rows to the benchmark's CSV.

use std::fs::{self, OpenOptions};
use std::io::{self, Write as _};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::Child;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::CoherentSession;
use crate::pool::{Pool, PoolConfig, PoolError, PoolAddress, MIB};
use crate::rpc::tcp::TcpEchoServer;
use crate::rpc::{create_channel, echo, RpcError, RpcServer};
use crate::stats::LatencyHistogram;
use crate::transfer::{
    build_gather_descriptors, build_scatter_descriptors, build_sparse_descriptors, FragmentedBuffer, KVLayoutSpec,
    SparseSelection, TransferEngine, TransferError,
};
use crate::workers::{collect_worker, shm_load_client, spawn_worker, tcp_load_client, LoadReport, ScratchPool, WorkerError};

pub const SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "benchmark,series,metric,value,unit";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("invalid benchmark config: {0}")]
    Config(String),
}

pub type BenchResult<T> = Result<T, BenchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub series: String,
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub version: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: thread::available_parallelism().map_or(1, |n| n.get()),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub benchmark: String,
    pub config: serde_json::Value,
    pub metrics: Vec<Metric>,
    pub flags: Vec<String>,
    pub environment: Environment,
}

impl BenchReport {
    pub fn new(benchmark: &str, config: &impl Serialize) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            benchmark: benchmark.into(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            metrics: Vec::new(),
            flags: Vec::new(),
            environment: Environment::current(),
        }
    }

    pub fn push(&mut self, series: &str, metric: &str, value: f64, unit: &str) {
        self.metrics.push(Metric { series: series.into(), metric: metric.into(), value, unit: unit.into() });
    }

    pub fn get(&self, series: &str, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.series == series && m.metric == metric).map(|m| m.value)
    }

    fn push_latency(&mut self, series: &str, h: &LatencyHistogram) {
        self.push(series, "p50", h.percentile_us(0.50), "us");
        self.push(series, "p99", h.percentile_us(0.99), "us");
    }

    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for m in &self.metrics {
            s.push_str(&format!("{},{},{},{},{}\n", self.benchmark, m.series, m.metric, m.value, m.unit));
        }
        s
    }

    /// Writes `<benchmark>-<n>.json` with the next unused `n` and appends the
    /// rows to `<benchmark>.csv`. Returns the JSON path.
    pub fn write_to(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let json = (0u32..)
            .map(|n| dir.join(format!("{}-{n}.json", self.benchmark)))
            .find(|p| !p.exists())
            .expect("unbounded range");
        fs::write(&json, serde_json::to_vec_pretty(self).map_err(io::Error::other)?)?;
        let csv = dir.join(format!("{}.csv", self.benchmark));
        let fresh = !csv.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&csv)?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        f.write_all(self.csv_rows().as_bytes())?;
        Ok(json)
    }
}

// --- rpc -----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpcBenchConfig {
    pub clients: u32,
    pub qd: usize,
    pub duration_ms: u64,
    /// Measure the loopback TCP baseline too.
    pub tcp: bool,
    /// Measure the shared-memory channel.
    pub shm: bool,
}

impl Default for RpcBenchConfig {
    fn default() -> Self {
        Self { clients: 1, qd: 1, duration_ms: 1000, tcp: true, shm: true }
    }
}

fn merge_loads(reports: &[LoadReport]) -> (u64, f64, u64, LatencyHistogram) {
    let mut h = LatencyHistogram::new();
    let mut ops = 0;
    let mut timeouts = 0;
    let mut elapsed: f64 = 0.0;
    for r in reports {
        h.merge(&r.latency);
        ops += r.ops;
        timeouts += r.timeouts;
        elapsed = elapsed.max(r.elapsed_s);
    }
    (ops, elapsed, timeouts, h)
}

fn push_load(rep: &mut BenchReport, series: &str, loads: &[LoadReport]) {
    let (ops, elapsed, timeouts, h) = merge_loads(loads);
    rep.push_latency(series, &h);
    rep.push(series, "ops", ops as f64, "ops");
    rep.push(series, "throughput", if elapsed > 0.0 { ops as f64 / elapsed / 1e6 } else { 0.0 }, "Mops");
    rep.push(series, "timeouts", timeouts as f64, "ops");
}

fn run_clients<F>(exe: Option<&Path>, clients: u32, args: impl Fn() -> Vec<String>, local: F) -> BenchResult<Vec<LoadReport>>
where
    F: Fn() -> thread::JoinHandle<Result<LoadReport, WorkerError>>,
{
    match exe {
        Some(exe) => {
            let children: Vec<io::Result<Child>> = (0..clients).map(|_| spawn_worker(exe, &args())).collect();
            children.into_iter().map(|c| Ok(collect_worker(c?)?)).collect()
        }
        None => {
            let hs: Vec<_> = (0..clients).map(|_| local()).collect();
            hs.into_iter().map(|h| Ok(h.join().expect("load thread")?)).collect()
        }
    }
}

/// Echo round trips over the shared-memory channel and over loopback TCP with
/// identical 64-byte frames. Clients are worker processes when `exe` is set.
pub fn bench_rpc(exe: Option<&Path>, cfg: &RpcBenchConfig) -> BenchResult<BenchReport> {
    let mut rep = BenchReport::new("rpc", cfg);
    if cfg.duration_ms == 0 || cfg.clients == 0 {
        rep.flags.push("empty".into());
        return Ok(rep);
    }
    let duration = Duration::from_millis(cfg.duration_ms);
    let qd = cfg.qd.max(1);
    if cfg.shm {
        let scratch = ScratchPool::create("rpcbench", 8 * MIB, 4, 64 * 1024)?;
        let slots = (cfg.clients as usize * qd).next_power_of_two().max(1) as u32;
        create_channel(&scratch.pool, 1, slots, 64)?;
        let stop = Arc::new(AtomicBool::new(false));
        let server = {
            let (pool, stop) = (scratch.pool.clone(), stop.clone());
            thread::spawn(move || -> Result<u64, RpcError> {
                let mut srv = RpcServer::attach(pool, 1)?;
                srv.serve(&mut echo, &stop)?;
                Ok(srv.stats().fence_batches)
            })
        };
        let path = scratch.path.display().to_string();
        let loads = run_clients(
            exe,
            cfg.clients,
            || {
                vec![
                    "shm-load".into(),
                    "--path".into(),
                    path.clone(),
                    "--channel".into(),
                    "1".into(),
                    "--qd".into(),
                    qd.to_string(),
                    "--duration-ms".into(),
                    cfg.duration_ms.to_string(),
                ]
            },
            || {
                let pool = scratch.pool.clone();
                thread::spawn(move || shm_load_client(pool, 1, qd, duration))
            },
        );
        stop.store(true, Ordering::Relaxed);
        let fences = server.join().expect("server thread")?;
        let loads = loads?;
        push_load(&mut rep, "shm", &loads);
        rep.push("shm", "fence_batches", fences as f64, "fences");
    }
    if cfg.tcp {
        match TcpEchoServer::spawn(64) {
            Ok(srv) => {
                let addr: SocketAddr = srv.addr();
                let loads = run_clients(
                    exe,
                    cfg.clients,
                    || {
                        vec![
                            "tcp-load".into(),
                            "--addr".into(),
                            addr.to_string(),
                            "--qd".into(),
                            qd.to_string(),
                            "--duration-ms".into(),
                            cfg.duration_ms.to_string(),
                        ]
                    },
                    || thread::spawn(move || tcp_load_client(addr, qd, duration)),
                )?;
                push_load(&mut rep, "tcp", &loads);
            }
            Err(e) => {
                log::warn!("tcp baseline unavailable: {e}");
                rep.flags.push("baseline_unavailable".into());
            }
        }
    }
    Ok(rep)
}

// --- transfer ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Staged,
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferBenchConfig {
    pub profile: KVLayoutSpec,
    pub mode: TransferMode,
    pub baseline: Baseline,
    pub iterations: usize,
    /// Block sizes swept in dense mode, as tokens per block.
    pub tokens_sweep: Vec<usize>,
}

impl TransferBenchConfig {
    pub fn new(profile: KVLayoutSpec, mode: TransferMode, baseline: Baseline) -> Self {
        Self { profile, mode, baseline, iterations: 30, tokens_sweep: vec![4, 8, 16, 32] }
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn time_us(f: impl FnOnce() -> Result<(), TransferError>) -> Result<f64, TransferError> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e6)
}

fn transfer_pool(block_bytes: usize, blocks: u64) -> BenchResult<Arc<Pool>> {
    let block = (block_bytes as u64).div_ceil(4096) * 4096;
    let bytes = (block * blocks).div_ceil(2 * MIB) * 2 * MIB;
    Ok(Arc::new(Pool::create_in_memory(PoolConfig::new("", bytes, 1, block).with_chunk(2 * MIB))?))
}

/// Dense mode: direct gather/scatter against the two-hop staged baseline for
/// each block size in the sweep. Sparse mode: one batched call against one
/// call per descriptor for a single-token selection.
pub fn bench_transfer(cfg: &TransferBenchConfig) -> BenchResult<BenchReport> {
    let mut rep = BenchReport::new("transfer", cfg);
    let iters = cfg.iterations.max(1);
    match cfg.mode {
        TransferMode::Dense => {
            for &tokens in &cfg.tokens_sweep {
                let layout = cfg.profile.clone().with_tokens_per_block(tokens)?;
                let series = format!("{}B", layout.block_bytes());
                let mut buf = FragmentedBuffer::new(&layout, 1, tokens as u64);
                buf.fill_random(7);
                let mut out = FragmentedBuffer::new(&layout, 1, tokens as u64 + 1);
                let pool = transfer_pool(layout.block_bytes(), 2)?;
                // each path runs on its own host session so cache state left
                // by one path never taxes the other
                let mut sd = CoherentSession::new(pool.clone());
                let mut ss = CoherentSession::new(pool.clone());
                let a = pool.alloc_block()?;
                let block = PoolAddress::new(a.offset, layout.block_bytes() as u64);
                let gather = build_gather_descriptors(&layout, &buf, 0)?;
                let scatter = build_scatter_descriptors(&layout, &out, 0)?;
                let mut staging = vec![0u8; layout.block_bytes()];
                let (mut wd, mut ws, mut rd, mut rs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let mut direct = TransferEngine::new();
                let mut staged = TransferEngine::new();
                let run_staged = cfg.baseline == Baseline::Staged;
                // round 0 is an unrecorded warm-up; the order of the two paths
                // alternates so drift affects both alike
                for round in 0..=iters {
                    if round == 1 {
                        direct.reset_stats();
                        staged.reset_stats();
                        wd.clear();
                        ws.clear();
                        rd.clear();
                        rs.clear();
                    }
                    for first in [round % 2 == 0, round % 2 == 1] {
                        if first {
                            wd.push(time_us(|| direct.gather_write(&mut sd, buf.arena(), &gather, block))?);
                            rd.push(time_us(|| direct.scatter_read(&mut sd, block, &scatter, out.arena_mut()))?);
                        } else if run_staged {
                            ws.push(time_us(|| {
                                staged.staged_gather_write(&mut ss, buf.arena(), &mut staging, &gather, block)
                            })?);
                            rs.push(time_us(|| {
                                staged.staged_scatter_read(&mut ss, block, &mut staging, &scatter, out.arena_mut())
                            })?);
                        }
                    }
                }
                let per_block = |e: &TransferEngine| e.stats().bytes_moved as f64 / (2 * iters) as f64;
                rep.push(&series, "descriptors", gather.len() as f64, "descriptors");
                rep.push(&series, "write_direct_p50", median(&mut wd), "us");
                rep.push(&series, "read_direct_p50", median(&mut rd), "us");
                rep.push(&series, "bytes_direct", per_block(&direct), "bytes");
                if run_staged {
                    rep.push(&series, "write_staged_p50", median(&mut ws), "us");
                    rep.push(&series, "read_staged_p50", median(&mut rs), "us");
                    rep.push(&series, "bytes_staged", per_block(&staged), "bytes");
                }
            }
        }
        TransferMode::Sparse => {
            let layout = &cfg.profile;
            let mut buf = FragmentedBuffer::new(layout, 1, 0);
            let sel = SparseSelection::uniform(layout, &[0]);
            let list = build_sparse_descriptors(layout, &buf, &sel)?;
            let pool = transfer_pool(layout.block_bytes(), 2)?;
            let mut s = CoherentSession::new(pool.clone());
            let a = pool.alloc_block()?;
            let blocks = [PoolAddress::new(a.offset, layout.block_bytes() as u64)];
            let (mut batched, mut per) = (Vec::new(), Vec::new());
            let mut eb = TransferEngine::new();
            let mut ep = TransferEngine::new();
            for round in 0..=iters {
                if round == 1 {
                    eb.reset_stats();
                    ep.reset_stats();
                    batched.clear();
                    per.clear();
                }
                for first in [round % 2 == 0, round % 2 == 1] {
                    if first {
                        batched.push(time_us(|| eb.sparse_read(&mut s, &blocks, &list, buf.arena_mut()))?);
                    } else {
                        per.push(time_us(|| ep.sparse_read_per_descriptor(&mut s, &blocks, &list, buf.arena_mut()))?);
                    }
                }
            }
            rep.push("sparse", "descriptors", list.len() as f64, "descriptors");
            rep.push("sparse", "batched_calls", (eb.stats().invocations / iters as u64) as f64, "calls");
            rep.push("sparse", "per_descriptor_calls", (ep.stats().invocations / iters as u64) as f64, "calls");
            rep.push("sparse", "batched_p50", median(&mut batched), "us");
            rep.push("sparse", "per_descriptor_p50", median(&mut per), "us");
        }
    }
    Ok(rep)
}

// --- skew ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkewConfig {
    pub zipf_s: f64,
    pub threads: usize,
    pub op_size: u64,
    pub interleave: bool,
    pub ops_per_thread: u64,
    pub pool_bytes: u64,
    pub devices: u32,
    pub chunk_bytes: u64,
    pub seed: u64,
}

impl Default for SkewConfig {
    fn default() -> Self {
        Self {
            zipf_s: 0.99,
            threads: 4,
            op_size: 4096,
            interleave: true,
            ops_per_thread: 20_000,
            pool_bytes: 64 * MIB,
            devices: 4,
            chunk_bytes: 2 * MIB,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewResult {
    pub device_bytes: Vec<u64>,
    /// max minus min of the per-device byte counters
    pub spread_bytes: u64,
    /// largest per-device share of all bytes written
    pub max_share: f64,
    pub latency: LatencyHistogram,
}

/// Writes `op_size` items chosen by Zipf rank (rank 1 at offset 0) from
/// several threads and reports the per-device byte counters.
pub fn run_skew(cfg: &SkewConfig) -> BenchResult<SkewResult> {
    if cfg.devices < 2 {
        return Err(BenchError::Config("skew benchmark needs at least 2 devices".into()));
    }
    if cfg.op_size == 0 || cfg.op_size > cfg.pool_bytes {
        return Err(BenchError::Config("op_size must be in 1..=pool_bytes".into()));
    }
    let pc = PoolConfig::new("", cfg.pool_bytes, cfg.devices, cfg.op_size.div_ceil(64) * 64)
        .with_chunk(cfg.chunk_bytes)
        .with_interleave(cfg.interleave);
    let pool = Arc::new(Pool::create_in_memory(pc)?);
    pool.set_accounting(true);
    let items = cfg.pool_bytes / cfg.op_size;
    let zipf = Zipf::new(items as f64, cfg.zipf_s).map_err(|e| BenchError::Config(e.to_string()))?;
    let handles: Vec<_> = (0..cfg.threads.max(1))
        .map(|t| {
            let pool = pool.clone();
            let (ops, op_size, seed) = (cfg.ops_per_thread, cfg.op_size, cfg.seed);
            thread::spawn(move || -> Result<LatencyHistogram, PoolError> {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
                let payload = vec![t as u8; op_size as usize];
                let mut h = LatencyHistogram::new();
                for _ in 0..ops {
                    let item = zipf.sample(&mut rng) as u64 - 1;
                    let start = Instant::now();
                    pool.write(item * op_size, &payload)?;
                    h.record(start.elapsed());
                }
                Ok(h)
            })
        })
        .collect();
    let mut latency = LatencyHistogram::new();
    for h in handles {
        latency.merge(&h.join().expect("skew thread")?);
    }
    let device_bytes = pool.device_load_report();
    let total: u64 = device_bytes.iter().sum();
    let max = device_bytes.iter().copied().max().unwrap_or(0);
    let min = device_bytes.iter().copied().min().unwrap_or(0);
    Ok(SkewResult {
        spread_bytes: max - min,
        max_share: if total == 0 { 0.0 } else { max as f64 / total as f64 },
        device_bytes,
        latency,
    })
}

/// Runs the skew workload with interleaving on and off.
pub fn bench_skew(cfg: &SkewConfig) -> BenchResult<BenchReport> {
    let mut rep = BenchReport::new("skew", cfg);
    for interleave in [true, false] {
        let r = run_skew(&SkewConfig { interleave, ..cfg.clone() })?;
        let series = if interleave { "interleave_on" } else { "interleave_off" };
        for (d, b) in r.device_bytes.iter().enumerate() {
            rep.push(series, &format!("device{d}_bytes"), *b as f64, "bytes");
        }
        rep.push(series, "spread", r.spread_bytes as f64, "bytes");
        rep.push(series, "max_share", r.max_share, "ratio");
        rep.push_latency(series, &r.latency);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::{builtin_presets, find_preset};

    #[test]
    fn report_files_are_append_only() {
        let dir = std::env::temp_dir().join(format!("poolkv-report-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let mut r = BenchReport::new("t", &serde_json::json!({"k": 1}));
        r.push("s", "m", 1.5, "us");
        let a = r.write_to(&dir).unwrap();
        let b = r.write_to(&dir).unwrap();
        assert_ne!(a, b);
        let csv = fs::read_to_string(dir.join("t.csv")).unwrap();
        assert_eq!(csv, format!("{CSV_HEADER}\nt,s,m,1.5,us\nt,s,m,1.5,us\n"));
        let back: BenchReport = serde_json::from_slice(&fs::read(&a).unwrap()).unwrap();
        assert_eq!(back, r);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn zero_duration_rpc_is_empty() {
        let rep = bench_rpc(None, &RpcBenchConfig { duration_ms: 0, ..RpcBenchConfig::default() }).unwrap();
        assert!(rep.metrics.is_empty());
        assert_eq!(rep.flags, vec!["empty".to_string()]);
    }

    #[test]
    fn rpc_threads_smoke() {
        let rep = bench_rpc(None, &RpcBenchConfig { duration_ms: 100, qd: 4, ..RpcBenchConfig::default() }).unwrap();
        assert!(rep.get("shm", "ops").unwrap() > 0.0);
        assert!(rep.get("tcp", "ops").unwrap() > 0.0);
        assert_eq!(rep.get("shm", "timeouts"), Some(0.0));
    }

    #[test]
    fn transfer_counts() {
        let q = find_preset(&builtin_presets(), "qwen32b-like").unwrap();
        let mut c = TransferBenchConfig::new(q.clone(), TransferMode::Dense, Baseline::Staged);
        c.iterations = 2;
        c.tokens_sweep = vec![16];
        let rep = bench_transfer(&c).unwrap();
        let direct = rep.get("2621440B", "bytes_direct").unwrap();
        assert_eq!(direct, q.block_bytes() as f64);
        assert_eq!(rep.get("2621440B", "bytes_staged").unwrap(), 2.0 * direct);
        let mut c = TransferBenchConfig::new(q, TransferMode::Sparse, Baseline::Direct);
        c.iterations = 2;
        let rep = bench_transfer(&c).unwrap();
        assert_eq!(rep.get("sparse", "batched_calls"), Some(1.0));
        assert_eq!(rep.get("sparse", "per_descriptor_calls"), Some(1024.0));
    }

    #[test]
    fn skew_counters() {
        let base = SkewConfig { ops_per_thread: 5000, threads: 2, ..SkewConfig::default() };
        let on_uniform = run_skew(&SkewConfig { zipf_s: 0.0, ..base.clone() }).unwrap();
        assert!(on_uniform.spread_bytes <= base.chunk_bytes, "{on_uniform:?}");
        let off_skew = run_skew(&SkewConfig { interleave: false, ..base.clone() }).unwrap();
        assert!(off_skew.max_share > 0.5, "{off_skew:?}");
        let total: u64 = off_skew.device_bytes.iter().sum();
        assert_eq!(total, 2 * 5000 * base.op_size);
        assert!(run_skew(&SkewConfig { devices: 1, ..base }).is_err());
    }
}
