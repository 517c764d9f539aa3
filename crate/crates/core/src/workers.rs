//! Client bodies that run inside emulated hosts (worker processes or
//! threads), and the helpers that spawn and collect them.
//!
//! A worker process is the `poolkv` binary invoked as `poolkv worker ...`; it
//! prints exactly one JSON document on stdout.

use std::collections::HashSet;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coherence::SessionMode;
use crate::index::service::{IndexClient, IndexClientError, IndexService};
use crate::index::{chain_hash, BlockHash, KvIndex};
use crate::pool::{Pool, PoolConfig, PoolError, MIB};
use crate::rpc::tcp::TcpClient;
use crate::rpc::{create_channel, Pending, RpcClient, RpcError, RpcServer};
use crate::stats::LatencyHistogram;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("worker {cmd} exited with {status}: {stderr}")]
    Failed { cmd: String, status: String, stderr: String },
    #[error("worker output is not valid JSON: {0}")]
    BadOutput(String),
}

pub type WorkerResult<T> = Result<T, WorkerError>;

static POOL_SEQ: AtomicU64 = AtomicU64::new(0);

/// A fresh backing-file path under the temp directory.
pub fn scratch_pool_path(tag: &str) -> PathBuf {
    let n = POOL_SEQ.fetch_add(1, Ordering::Relaxed);
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_nanos());
    std::env::temp_dir().join(format!("poolkv-{tag}-{}-{n}-{nanos}.pool", std::process::id()))
}

/// Removes the backing file when dropped.
pub struct ScratchPool {
    pub pool: Arc<Pool>,
    pub path: PathBuf,
}

impl ScratchPool {
    pub fn create(tag: &str, pool_bytes: u64, devices: u32, block_bytes: u64) -> WorkerResult<Self> {
        let path = scratch_pool_path(tag);
        let pool = Pool::create(PoolConfig::new(&path, pool_bytes, devices, block_bytes).with_chunk(2 * MIB))?;
        Ok(Self { pool: Arc::new(pool), path })
    }
}

impl Drop for ScratchPool {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn spawn_worker(exe: &Path, args: &[String]) -> io::Result<Child> {
    Command::new(exe)
        .arg("worker")
        .args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
}

pub fn collect_worker<T: DeserializeOwned>(child: Child) -> WorkerResult<T> {
    let out = child.wait_with_output()?;
    if !out.status.success() {
        return Err(WorkerError::Failed {
            cmd: "worker".into(),
            status: out.status.to_string(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        });
    }
    serde_json::from_slice(&out.stdout).map_err(|e| WorkerError::BadOutput(format!("{e}: {}", String::from_utf8_lossy(&out.stdout))))
}

// --- nonce-tagged RPC ------------------------------------------------------

pub const NONCE_FRAME: usize = 64;
const NONCE_XOR: u8 = 0xA5;

/// Server handler for the nonce suite: every byte is flipped with a fixed
/// mask, so a response matches exactly one request.
pub fn nonce_transform(req: &[u8], resp: &mut [u8]) -> usize {
    for (o, i) in resp.iter_mut().zip(req) {
        *o = i ^ NONCE_XOR;
    }
    req.len()
}

fn nonce_request(client: u32, seq: u64, nonce: u64) -> [u8; NONCE_FRAME] {
    let mut b = [0u8; NONCE_FRAME];
    b[0..4].copy_from_slice(&client.to_le_bytes());
    b[4..12].copy_from_slice(&seq.to_le_bytes());
    b[12..20].copy_from_slice(&nonce.to_le_bytes());
    let mut x = nonce ^ seq.rotate_left(17);
    for byte in &mut b[20..] {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        *byte = (x >> 56) as u8;
    }
    b
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonceConfig {
    pub client_id: u32,
    pub calls: u64,
    pub qd: usize,
    pub timeout_ms: u64,
    pub seed: u64,
    pub break_read_fresh: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NonceReport {
    pub client_id: u32,
    pub submitted: u64,
    pub ok: u64,
    pub mismatches: u64,
    pub timeouts: u64,
    pub errors: u64,
    pub first_error: Option<String>,
    pub elapsed_ms: u64,
}

/// Issues `calls` nonce-tagged requests keeping up to `qd` in flight. Stops
/// at the first timeout or error.
pub fn nonce_client(pool: Arc<Pool>, channel: u32, cfg: &NonceConfig) -> NonceReport {
    let started = Instant::now();
    let mut rep = NonceReport { client_id: cfg.client_id, ..NonceReport::default() };
    let mut client = match RpcClient::attach(pool, channel) {
        Ok(c) => c.with_timeout(Duration::from_millis(cfg.timeout_ms)),
        Err(e) => {
            rep.errors += 1;
            rep.first_error = Some(e.to_string());
            return rep;
        }
    };
    client.session_mut().set_mode(SessionMode { break_read_fresh: cfg.break_read_fresh, ..SessionMode::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (cfg.client_id as u64) << 32);
    let mut inflight: Vec<(Pending, [u8; NONCE_FRAME])> = Vec::with_capacity(cfg.qd);
    let mut next_seq = 0u64;
    let qd = cfg.qd.max(1);
    let mut idle = 0u32;
    'run: while rep.ok + rep.mismatches < cfg.calls {
        while inflight.len() < qd && next_seq < cfg.calls {
            let req = nonce_request(cfg.client_id, next_seq, rand::Rng::random(&mut rng));
            match client.submit(&req) {
                Ok(p) => inflight.push((p, req)),
                Err(e) => {
                    note_error(&mut rep, &e);
                    break 'run;
                }
            }
            next_seq += 1;
            rep.submitted += 1;
        }
        let mut progressed = false;
        let mut i = 0;
        while i < inflight.len() {
            match client.try_complete(&inflight[i].0) {
                Ok(Some(resp)) => {
                    let (_, req) = inflight.swap_remove(i);
                    let good = resp.len() == NONCE_FRAME && resp.iter().zip(&req).all(|(r, q)| *r == q ^ NONCE_XOR);
                    if good {
                        rep.ok += 1;
                    } else {
                        rep.mismatches += 1;
                    }
                    progressed = true;
                }
                Ok(None) if inflight[i].0.elapsed() > Duration::from_millis(cfg.timeout_ms) => {
                    let (p, _) = inflight.swap_remove(i);
                    let _ = client.abandon(&p);
                    rep.timeouts += 1;
                    break 'run;
                }
                Ok(None) => i += 1,
                Err(e) => {
                    note_error(&mut rep, &e);
                    break 'run;
                }
            }
        }
        if progressed {
            idle = 0;
        } else {
            crate::rpc::Backoff::default().wait(idle);
            idle = idle.saturating_add(1);
        }
    }
    rep.elapsed_ms = started.elapsed().as_millis() as u64;
    rep
}

fn note_error(rep: &mut NonceReport, e: &RpcError) {
    match e {
        RpcError::Timeout(_) | RpcError::ChannelFull(_) => rep.timeouts += 1,
        _ => rep.errors += 1,
    }
    rep.first_error.get_or_insert_with(|| e.to_string());
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonceSuiteConfig {
    pub clients: u32,
    pub calls_per_client: u64,
    /// Queue depth per client, cycled when there are more clients.
    pub qds: Vec<usize>,
    pub timeout_ms: u64,
    pub seed: u64,
    pub break_read_fresh: bool,
}

impl Default for NonceSuiteConfig {
    fn default() -> Self {
        Self {
            clients: 8,
            calls_per_client: 100_000,
            qds: vec![1, 2, 4, 8, 16, 32, 64, 128],
            timeout_ms: 5_000,
            seed: 1,
            break_read_fresh: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonceSuiteReport {
    pub clients: Vec<NonceReport>,
    pub expected_calls: u64,
    pub server_handled: u64,
    pub server_duplicates: u64,
    pub server_invalid_transitions: u64,
    pub elapsed_ms: u64,
    pub processes: bool,
}

impl NonceSuiteReport {
    /// Every request answered exactly once with its own response.
    pub fn bijection_holds(&self) -> bool {
        let ok: u64 = self.clients.iter().map(|c| c.ok).sum();
        let bad: u64 = self.clients.iter().map(|c| c.mismatches + c.timeouts + c.errors).sum();
        ok == self.expected_calls
            && bad == 0
            && self.server_handled == self.expected_calls
            && self.server_duplicates == 0
            && self.server_invalid_transitions == 0
    }

    pub fn timeouts(&self) -> u64 {
        self.clients.iter().map(|c| c.timeouts).sum()
    }
}

/// Runs the nonce suite against one shared channel. With `exe`, each client
/// is a separate worker process; otherwise clients are threads.
pub fn rpc_nonce_suite(exe: Option<&Path>, cfg: &NonceSuiteConfig) -> WorkerResult<NonceSuiteReport> {
    let scratch = ScratchPool::create("nonce", 8 * MIB, 4, 64 * 1024)?;
    let pool = scratch.pool.clone();
    let slots: usize = (0..cfg.clients as usize).map(|i| cfg.qds[i % cfg.qds.len()]).sum::<usize>().max(1);
    let channel = 1;
    create_channel(&pool, channel, slots.next_power_of_two() as u32, NONCE_FRAME as u32)?;
    let stop = Arc::new(AtomicBool::new(false));
    let mode = SessionMode { break_read_fresh: cfg.break_read_fresh, ..SessionMode::default() };
    let server = {
        let (pool, stop) = (pool.clone(), stop.clone());
        thread::spawn(move || -> WorkerResult<(u64, u64, u64)> {
            let mut srv = RpcServer::attach_with_mode(pool, channel, mode)?;
            let mut seen: HashSet<(u32, u64)> = HashSet::new();
            let mut dups = 0u64;
            let mut handler = |req: &[u8], resp: &mut [u8]| {
                if req.len() >= 12 {
                    let key = (u32::from_le_bytes(req[0..4].try_into().unwrap()), u64::from_le_bytes(req[4..12].try_into().unwrap()));
                    if !seen.insert(key) {
                        dups += 1;
                    }
                }
                nonce_transform(req, resp)
            };
            srv.serve(&mut handler, &stop)?;
            let st = srv.stats().clone();
            Ok((st.handled, dups, st.invalid_transitions))
        })
    };
    let started = Instant::now();
    let client_cfgs: Vec<NonceConfig> = (0..cfg.clients)
        .map(|i| NonceConfig {
            client_id: i,
            calls: cfg.calls_per_client,
            qd: cfg.qds[i as usize % cfg.qds.len()],
            timeout_ms: cfg.timeout_ms,
            seed: cfg.seed,
            break_read_fresh: cfg.break_read_fresh,
        })
        .collect();
    let reports: Vec<WorkerResult<NonceReport>> = match exe {
        Some(exe) => {
            let children: Vec<io::Result<Child>> = client_cfgs
                .iter()
                .map(|c| {
                    spawn_worker(
                        exe,
                        &[
                            "rpc-nonce".into(),
                            "--path".into(),
                            scratch.path.display().to_string(),
                            "--channel".into(),
                            channel.to_string(),
                            "--config".into(),
                            serde_json::to_string(c).expect("serializable"),
                        ],
                    )
                })
                .collect();
            children.into_iter().map(|c| collect_worker(c?)).collect()
        }
        None => {
            let handles: Vec<_> = client_cfgs
                .into_iter()
                .map(|c| {
                    let pool = pool.clone();
                    thread::spawn(move || nonce_client(pool, channel, &c))
                })
                .collect();
            handles.into_iter().map(|h| Ok(h.join().expect("client thread"))).collect()
        }
    };
    stop.store(true, Ordering::Relaxed);
    let server_result = server.join().expect("server thread");
    let clients = reports.into_iter().collect::<WorkerResult<Vec<_>>>()?;
    let (server_handled, server_duplicates, server_invalid_transitions) = server_result?;
    Ok(NonceSuiteReport {
        clients,
        expected_calls: cfg.clients as u64 * cfg.calls_per_client,
        server_handled,
        server_duplicates,
        server_invalid_transitions,
        elapsed_ms: started.elapsed().as_millis() as u64,
        processes: exe.is_some(),
    })
}

// --- load generators -------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub ops: u64,
    pub elapsed_s: f64,
    pub timeouts: u64,
    pub latency: LatencyHistogram,
}

/// Keeps `qd` echo requests in flight on a shared-memory channel.
pub fn shm_load_client(pool: Arc<Pool>, channel: u32, qd: usize, duration: Duration) -> WorkerResult<LoadReport> {
    let mut client = RpcClient::attach(pool, channel)?;
    let req = [0x5au8; NONCE_FRAME];
    let started = Instant::now();
    let deadline = started + duration;
    let mut inflight: Vec<Pending> = Vec::with_capacity(qd);
    let mut rep = LoadReport::default();
    let backoff = crate::rpc::Backoff::default();
    let mut idle = 0u32;
    loop {
        let open = Instant::now() < deadline;
        while open && inflight.len() < qd.max(1) {
            inflight.push(client.submit(&req)?);
        }
        if inflight.is_empty() {
            break;
        }
        let before = inflight.len();
        let mut i = 0;
        while i < inflight.len() {
            match client.try_complete(&inflight[i]) {
                Ok(Some(_)) => {
                    inflight.swap_remove(i);
                    rep.ops += 1;
                }
                Ok(None) if inflight[i].elapsed() > Duration::from_secs(5) => {
                    let p = inflight.swap_remove(i);
                    client.abandon(&p)?;
                    rep.timeouts += 1;
                }
                Ok(None) => i += 1,
                Err(e) => return Err(e.into()),
            }
        }
        if inflight.len() == before {
            backoff.wait(idle);
            idle = idle.saturating_add(1);
        } else {
            idle = 0;
        }
    }
    rep.elapsed_s = started.elapsed().as_secs_f64();
    rep.latency = client.stats().latency.clone();
    Ok(rep)
}

pub fn tcp_load_client(addr: SocketAddr, qd: usize, duration: Duration) -> WorkerResult<LoadReport> {
    let mut c = TcpClient::connect(addr, NONCE_FRAME)?;
    let started = Instant::now();
    let ops = c.run_pipelined(qd, started + duration)?;
    Ok(LoadReport { ops, elapsed_s: started.elapsed().as_secs_f64(), timeouts: 0, latency: c.latency.clone() })
}

// --- index insert race -----------------------------------------------------

pub const INDEX_CHANNEL: u32 = 2;

pub fn race_hash(i: u64) -> BlockHash {
    let tokens: Vec<u32> = (0..16).map(|k| (i as u32).wrapping_mul(2654435761).wrapping_add(k)).collect();
    chain_hash(BlockHash::ROOT, &tokens, 16).expect("16 tokens")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RaceReport {
    pub client_id: u32,
    pub won: Vec<u64>,
    pub in_flight: u64,
    pub exists: u64,
    /// READY lookups that returned an address this client did not see completed
    pub early_visible: u64,
    pub errors: u64,
    pub first_error: Option<String>,
}

/// Tries to insert every race hash, in a client-specific order. Winners
/// complete their insert only after a pass over the other hashes, so losers
/// see both in-flight and already-present outcomes.
pub fn index_race_client(pool: Arc<Pool>, client_id: u32, hashes: u64, seed: u64) -> RaceReport {
    let mut rep = RaceReport { client_id, ..RaceReport::default() };
    let mut client = match IndexClient::attach(pool.clone(), INDEX_CHANNEL, 16) {
        Ok(c) => c,
        Err(e) => {
            rep.errors += 1;
            rep.first_error = Some(e.to_string());
            return rep;
        }
    };
    let mut order: Vec<u64> = (0..hashes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ client_id as u64));
    let mut tickets = Vec::new();
    for &i in &order {
        let h = race_hash(i);
        let addr = match pool.alloc_block() {
            Ok(a) => a,
            Err(e) => {
                rep.errors += 1;
                rep.first_error.get_or_insert(e.to_string());
                continue;
            }
        };
        match client.insert(h, addr) {
            Ok(t) => {
                // a WRITING entry must stay invisible to readers
                if let Ok(Some(_)) = client.lookup(h) {
                    rep.early_visible += 1;
                }
                tickets.push((i, t));
            }
            Err(e) => {
                let _ = pool.free_block(addr);
                match e {
                    IndexClientError::InFlight => rep.in_flight += 1,
                    IndexClientError::Exists => rep.exists += 1,
                    other => {
                        rep.errors += 1;
                        rep.first_error.get_or_insert(other.to_string());
                    }
                }
            }
        }
    }
    for (i, t) in tickets {
        match client.complete(t) {
            Ok(_) => rep.won.push(i),
            Err(e) => {
                rep.errors += 1;
                rep.first_error.get_or_insert(e.to_string());
            }
        }
    }
    rep
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceSuiteReport {
    pub clients: Vec<RaceReport>,
    pub hashes: u64,
    pub index_entries: usize,
    pub ready_entries: usize,
}

impl RaceSuiteReport {
    /// Exactly one winner per hash, no reader saw a WRITING entry.
    pub fn single_winner(&self) -> bool {
        let mut wins = vec![0u32; self.hashes as usize];
        for c in &self.clients {
            for &i in &c.won {
                wins[i as usize] += 1;
            }
        }
        let clean = self.clients.iter().all(|c| c.errors == 0 && c.early_visible == 0);
        clean && wins.iter().all(|&w| w == 1) && self.ready_entries == self.hashes as usize
    }
}

/// Index server in this process, `clients` racing inserters as worker
/// processes (or threads without `exe`).
pub fn index_race_suite(exe: Option<&Path>, clients: u32, hashes: u64, seed: u64) -> WorkerResult<RaceSuiteReport> {
    let scratch = ScratchPool::create("race", 64 * MIB, 4, 4096)?;
    let pool = scratch.pool.clone();
    create_channel(&pool, INDEX_CHANNEL, 64, 64)?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let (pool, stop) = (pool.clone(), stop.clone());
        thread::spawn(move || -> WorkerResult<(usize, usize)> {
            let mut svc = IndexService::new(KvIndex::new(pool.clone()));
            let mut srv = RpcServer::attach(pool, INDEX_CHANNEL)?;
            srv.serve(&mut |q: &[u8], r: &mut [u8]| svc.handle(q, r), &stop)?;
            let st = svc.index().stats();
            Ok((st.entries as usize, st.ready as usize))
        })
    };
    let reports: Vec<WorkerResult<RaceReport>> = match exe {
        Some(exe) => {
            let children: Vec<io::Result<Child>> = (0..clients)
                .map(|i| {
                    let args: Vec<String> = vec![
                        "index-race".into(),
                        "--path".into(),
                        scratch.path.display().to_string(),
                        "--client-id".into(),
                        i.to_string(),
                        "--hashes".into(),
                        hashes.to_string(),
                        "--seed".into(),
                        seed.to_string(),
                    ];
                    spawn_worker(exe, &args)
                })
                .collect();
            children.into_iter().map(|c| collect_worker(c?)).collect()
        }
        None => {
            let hs: Vec<_> = (0..clients)
                .map(|i| {
                    let pool = pool.clone();
                    thread::spawn(move || index_race_client(pool, i, hashes, seed))
                })
                .collect();
            hs.into_iter().map(|h| Ok(h.join().expect("race thread"))).collect()
        }
    };
    stop.store(true, Ordering::Relaxed);
    let (index_entries, ready_entries) = server.join().expect("index server")?;
    Ok(RaceSuiteReport { clients: reports.into_iter().collect::<WorkerResult<_>>()?, hashes, index_entries, ready_entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonce_frames_are_distinct_and_transform_inverts() {
        let a = nonce_request(1, 2, 3);
        let b = nonce_request(1, 3, 3);
        assert_ne!(a, b);
        let mut r = [0u8; NONCE_FRAME];
        nonce_transform(&a, &mut r);
        let mut back = [0u8; NONCE_FRAME];
        nonce_transform(&r, &mut back);
        assert_eq!(back, a);
    }

    #[test]
    fn threaded_nonce_suite_small() {
        let cfg = NonceSuiteConfig { clients: 3, calls_per_client: 2000, qds: vec![1, 8, 32], ..NonceSuiteConfig::default() };
        let rep = rpc_nonce_suite(None, &cfg).unwrap();
        assert!(rep.bijection_holds(), "{rep:?}");
    }

    #[test]
    fn threaded_nonce_suite_fails_under_mutation() {
        let cfg = NonceSuiteConfig {
            clients: 2,
            calls_per_client: 200,
            qds: vec![1, 4],
            timeout_ms: 300,
            break_read_fresh: true,
            ..NonceSuiteConfig::default()
        };
        let rep = rpc_nonce_suite(None, &cfg).unwrap();
        assert!(!rep.bijection_holds());
        assert!(rep.timeouts() > 0);
    }

    #[test]
    fn threaded_index_race() {
        let rep = index_race_suite(None, 4, 200, 7).unwrap();
        assert!(rep.single_winner(), "{rep:?}");
    }
}
