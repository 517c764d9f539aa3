use std::error::Error;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use poolkv::bench::{
    bench_rpc, bench_skew, bench_transfer, Baseline, BenchReport, RpcBenchConfig, SkewConfig, TransferBenchConfig,
    TransferMode,
};
use poolkv::coherence::schedule::{explore_exhaustive, explore_random, stale_demo_schedule, OpSet, ScheduleRunner};
use poolkv::index::service::{IndexClient, IndexService};
use poolkv::index::{KvIndex, DEFAULT_BLOCK_TOKENS};
use poolkv::pool::{HostPartition, Pool, PoolConfig, MIB};
use poolkv::rpc::{attach_channel, create_channel, echo, RpcServer, DEFAULT_SLOTS};
use poolkv::sched::{generate_trace, run_trace, CostModel, Policy, RequestTrace, TraceConfig};
use poolkv::transfer::{builtin_presets, find_preset, parse_presets};
use poolkv::verify::{verify_all, VerifyConfig};
use poolkv::workers::{
    index_race_client, nonce_client, shm_load_client, tcp_load_client, NonceConfig, INDEX_CHANNEL,
};

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const RPC_CHANNEL: u32 = 1;

type CliResult = Result<ExitCode, Box<dyn Error>>;

/// Shared-memory KV-cache pool toolkit.
#[derive(Parser)]
#[command(name = "poolkv", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and inspect pool backing files.
    #[command(subcommand)]
    Pool(PoolCmd),
    /// Coherence protocol demonstrations and schedule checks.
    #[command(subcommand)]
    Coh(CohCmd),
    /// Shared-memory RPC server and benchmark.
    #[command(subcommand)]
    Rpc(RpcCmd),
    /// KV block index server and client queries.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Transfer engine benchmark.
    #[command(subcommand)]
    Xfer(XferCmd),
    /// Trace-driven scheduler simulation.
    #[command(subcommand)]
    Sched(SchedCmd),
    /// Microbenchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run every self-check suite.
    Verify(VerifyArgs),
    #[command(subcommand, hide = true)]
    Worker(WorkerCmd),
}

#[derive(Args, Clone)]
struct PathArg {
    /// Pool backing file.
    #[arg(long, env = "POOLKV_PATH")]
    path: PathBuf,
}

#[derive(Args, Clone)]
struct OutArg {
    /// Directory for JSON and CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PoolCmd {
    /// Create a pool backing file.
    Create {
        #[command(flatten)]
        path: PathArg,
        #[arg(long, default_value_t = 64)]
        mib: u64,
        #[arg(long, default_value_t = 4)]
        devices: u32,
        #[arg(long, default_value_t = 65536)]
        block_bytes: u64,
        #[arg(long, default_value_t = 2 * MIB)]
        chunk_bytes: u64,
        #[arg(long)]
        no_interleave: bool,
    },
    /// Attach and print the header.
    Attach {
        #[command(flatten)]
        path: PathArg,
    },
    /// Header, channels and per-device write counters.
    Stat {
        #[command(flatten)]
        path: PathArg,
    },
}

#[derive(Subcommand)]
enum CohCmd {
    /// Replays the canonical stale-read schedule.
    DemoStale {
        #[arg(long)]
        break_read_fresh: bool,
    },
    /// Random and exhaustive two-host schedules.
    Verify {
        #[arg(long, default_value_t = 100_000)]
        schedules: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        break_read_fresh: bool,
    },
}

#[derive(Subcommand)]
enum RpcCmd {
    /// Echo server on a channel; creates the channel if absent.
    Serve {
        #[command(flatten)]
        path: PathArg,
        #[arg(long, default_value_t = RPC_CHANNEL)]
        channel: u32,
        #[arg(long, default_value_t = DEFAULT_SLOTS)]
        slots: u32,
        /// Stop after this long; runs until killed when absent.
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// SHM vs TCP echo latency and throughput.
    Bench(RpcBenchArgs),
}

#[derive(Args, Clone)]
struct RpcBenchArgs {
    #[arg(long, default_value_t = 1)]
    clients: u32,
    #[arg(long, default_value_t = 1)]
    qd: usize,
    #[arg(long, default_value_t = 1000)]
    duration_ms: u64,
    /// Run clients as threads instead of worker processes.
    #[arg(long)]
    threads: bool,
    #[arg(long)]
    no_tcp: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand)]
enum IndexCmd {
    /// Index server over the pool's free blocks.
    Serve {
        #[command(flatten)]
        path: PathArg,
        #[arg(long, default_value_t = INDEX_CHANNEL)]
        channel: u32,
        #[arg(long, default_value_t = DEFAULT_BLOCK_TOKENS)]
        block_tokens: usize,
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Entry counts and byte usage from a running index server.
    Stat {
        #[command(flatten)]
        path: PathArg,
        #[arg(long, default_value_t = INDEX_CHANNEL)]
        channel: u32,
    },
    /// List every cached block from a running index server.
    Dump {
        #[command(flatten)]
        path: PathArg,
        #[arg(long, default_value_t = INDEX_CHANNEL)]
        channel: u32,
    },
}

#[derive(Subcommand)]
enum XferCmd {
    /// Direct vs staged dense transfer, or batched vs per-descriptor sparse.
    Bench(XferBenchArgs),
}

#[derive(Args, Clone)]
struct XferBenchArgs {
    #[arg(long, default_value = "qwen32b-like")]
    profile: String,
    #[arg(long, value_enum, default_value_t = TransferMode::Dense)]
    mode: TransferMode,
    #[arg(long, value_enum, default_value_t = Baseline::Staged)]
    baseline: Baseline,
    /// Preset file replacing the built-in layouts.
    #[arg(long)]
    presets: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyChoice {
    Oblivious,
    Locality,
    Both,
}

#[derive(Subcommand)]
enum SchedCmd {
    /// Oblivious vs locality-aware dispatch over a synthetic or replayed trace.
    Run(SchedArgs),
}

#[derive(Args, Clone)]
struct SchedArgs {
    #[arg(long, default_value_t = 10_000)]
    requests: usize,
    #[arg(long, default_value_t = 16)]
    instances: usize,
    #[arg(long, default_value_t = 0.99)]
    zipf: f64,
    #[arg(long, default_value_t = 1000)]
    prefixes: u64,
    #[arg(long, default_value_t = 0.98)]
    utilization: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Both)]
    policy: PolicyChoice,
    /// Replay a trace CSV instead of generating one.
    #[arg(long)]
    trace_in: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// SHM vs TCP echo latency and throughput.
    Rpc(RpcBenchArgs),
    /// Direct vs staged dense transfer, or batched vs per-descriptor sparse.
    Transfer(XferBenchArgs),
    /// Per-device write load under Zipf skew, interleaving on and off.
    Skew {
        #[arg(long, default_value_t = 0.99)]
        zipf: f64,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 4096)]
        op_size: u64,
        #[arg(long, default_value_t = 20_000)]
        ops: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    break_read_fresh: bool,
    /// Smaller iteration counts.
    #[arg(long)]
    quick: bool,
    /// Run clients as threads instead of worker processes.
    #[arg(long)]
    threads: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum WorkerCmd {
    RpcNonce {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        channel: u32,
        #[arg(long)]
        config: String,
    },
    IndexRace {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        client_id: u32,
        #[arg(long)]
        hashes: u64,
        #[arg(long)]
        seed: u64,
    },
    ShmLoad {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        channel: u32,
        #[arg(long)]
        qd: usize,
        #[arg(long)]
        duration_ms: u64,
    },
    TcpLoad {
        #[arg(long)]
        addr: SocketAddr,
        #[arg(long)]
        qd: usize,
        #[arg(long)]
        duration_ms: u64,
    },
    /// Allocates blocks and prints their offsets.
    Alloc {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        count: u64,
        /// Allocate from this host's partition of `hosts`.
        #[arg(long, requires = "hosts")]
        host: Option<u32>,
        #[arg(long)]
        hosts: Option<u32>,
    },
    /// Prints the status word of every slot of a channel.
    Slots {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        channel: u32,
    },
    /// Attaches and prints the header with the channel directory.
    Attach {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<(), Box<dyn Error>> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn emit(report: &BenchReport, out: &OutArg) -> Result<(), Box<dyn Error>> {
    print!("{}", report.csv_rows());
    for f in &report.flags {
        eprintln!("flag: {f}");
    }
    if let Some(dir) = &out.out {
        let path = report.write_to(dir)?;
        eprintln!("report: {}", path.display());
    }
    Ok(())
}

fn stop_after(duration_ms: Option<u64>) -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    if let Some(ms) = duration_ms {
        let s = stop.clone();
        thread::spawn(move || {
            thread::sleep(Duration::from_millis(ms));
            s.store(true, Ordering::Relaxed);
        });
    }
    stop
}

fn attach(path: &Path) -> Result<Arc<Pool>, Box<dyn Error>> {
    Ok(Arc::new(Pool::attach(path)?))
}

fn run(cmd: Cmd) -> CliResult {
    match cmd {
        Cmd::Pool(c) => pool_cmd(c),
        Cmd::Coh(c) => coh_cmd(c),
        Cmd::Rpc(RpcCmd::Serve { path, channel, slots, duration_ms }) => {
            let pool = attach(&path.path)?;
            if attach_channel(&pool, channel).is_err() {
                create_channel(&pool, channel, slots, 64)?;
            }
            let mut srv = RpcServer::attach(pool, channel)?;
            srv.serve(&mut echo, &stop_after(duration_ms))?;
            print_json(srv.stats())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Rpc(RpcCmd::Bench(a)) | Cmd::Bench(BenchCmd::Rpc(a)) => {
            let exe = std::env::current_exe()?;
            let cfg = RpcBenchConfig { clients: a.clients, qd: a.qd, duration_ms: a.duration_ms, tcp: !a.no_tcp, shm: true };
            let report = bench_rpc(if a.threads { None } else { Some(&exe) }, &cfg)?;
            emit(&report, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Index(c) => index_cmd(c),
        Cmd::Xfer(XferCmd::Bench(a)) | Cmd::Bench(BenchCmd::Transfer(a)) => {
            let presets = match &a.presets {
                Some(p) => parse_presets(&std::fs::read_to_string(p)?)?,
                None => builtin_presets(),
            };
            let profile = find_preset(&presets, &a.profile)?;
            let mut cfg = TransferBenchConfig::new(profile, a.mode, a.baseline);
            cfg.iterations = a.iterations;
            emit(&bench_transfer(&cfg)?, &a.out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sched(SchedCmd::Run(a)) => sched_cmd(a),
        Cmd::Bench(BenchCmd::Skew { zipf, threads, op_size, ops, seed, out }) => {
            let cfg = SkewConfig { zipf_s: zipf, threads, op_size, ops_per_thread: ops, seed, ..SkewConfig::default() };
            emit(&bench_skew(&cfg)?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Verify(a) => {
            let exe = std::env::current_exe()?;
            let cfg = VerifyConfig {
                seed: a.seed,
                break_read_fresh: a.break_read_fresh,
                exe: (!a.threads).then_some(exe),
                quick: a.quick,
            };
            let summary = verify_all(&cfg);
            if a.json {
                print_json(&summary)?;
            } else {
                for s in &summary.suites {
                    let verdict = if s.passed { "PASS" } else { "FAIL" };
                    println!("{verdict} {:<11} {:>7} ms  {}", s.suite, s.elapsed_ms, s.detail);
                }
                for f in summary.failures() {
                    println!("repro: poolkv verify --seed {} (suite {})", f.seed, f.suite);
                }
            }
            Ok(if summary.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAIL) })
        }
        Cmd::Worker(w) => worker_cmd(w),
    }
}

fn pool_cmd(c: PoolCmd) -> CliResult {
    match c {
        PoolCmd::Create { path, mib, devices, block_bytes, chunk_bytes, no_interleave } => {
            let cfg = PoolConfig::new(&path.path, mib * MIB, devices, block_bytes)
                .with_chunk(chunk_bytes)
                .with_interleave(!no_interleave);
            print_json(&Pool::create(cfg)?.header_summary())?;
        }
        PoolCmd::Attach { path } => print_json(&attach(&path.path)?.header_summary())?,
        PoolCmd::Stat { path } => {
            let pool = attach(&path.path)?;
            print_json(&serde_json::json!({
                "header": pool.header_summary(),
                "channels": pool.channels(),
                "device_write_bytes": pool.device_load_report(),
                "free_bytes": pool.free_bytes(),
            }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn coh_cmd(c: CohCmd) -> CliResult {
    match c {
        CohCmd::DemoStale { break_read_fresh } => {
            let s = stale_demo_schedule();
            let stale = ScheduleRunner::new(break_read_fresh).run(&s);
            println!("{s}");
            for r in &stale {
                println!("stale read at op {}: expected {:#x}, observed {:#x}", r.op_index, r.expected, r.observed);
            }
            Ok(ExitCode::SUCCESS)
        }
        CohCmd::Verify { schedules, seed, break_read_fresh } => {
            let runner = ScheduleRunner::new(break_read_fresh);
            let random = explore_random(&runner, schedules, seed, 4, 16, OpSet::Compliant);
            let exhaustive = explore_exhaustive(&runner, 3, OpSet::Compliant);
            let hazard = explore_exhaustive(&runner, 3, OpSet::All);
            print_json(&serde_json::json!({
                "random_compliant": random,
                "exhaustive_compliant": exhaustive,
                "exhaustive_all": hazard,
            }))?;
            let ok = random.stale_reads == 0 && exhaustive.stale_reads == 0 && hazard.stale_schedules > 0;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(EXIT_FAIL) })
        }
    }
}

fn index_cmd(c: IndexCmd) -> CliResult {
    match c {
        IndexCmd::Serve { path, channel, block_tokens, duration_ms } => {
            let pool = attach(&path.path)?;
            if attach_channel(&pool, channel).is_err() {
                create_channel(&pool, channel, 64, 64)?;
            }
            let mut svc = IndexService::new(KvIndex::with_block_tokens(pool.clone(), block_tokens));
            let mut srv = RpcServer::attach(pool, channel)?;
            srv.serve(&mut |req: &[u8], resp: &mut [u8]| svc.handle(req, resp), &stop_after(duration_ms))?;
            print_json(&svc.index().stats())?;
        }
        IndexCmd::Stat { path, channel } => {
            let mut c = IndexClient::attach(attach(&path.path)?, channel, DEFAULT_BLOCK_TOKENS)?;
            print_json(&c.stat()?)?;
        }
        IndexCmd::Dump { path, channel } => {
            let mut c = IndexClient::attach(attach(&path.path)?, channel, DEFAULT_BLOCK_TOKENS)?;
            for (hash, addr, ready, refs) in c.dump()? {
                println!("{:032x} offset={} len={} ready={ready} refs={refs}", hash.0, addr.offset, addr.length);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sched_cmd(a: SchedArgs) -> CliResult {
    let cost = CostModel::default();
    let mut cfg = TraceConfig {
        requests: a.requests,
        instances: a.instances,
        zipf_s: a.zipf,
        prefixes: a.prefixes,
        utilization: a.utilization,
        ..TraceConfig::default()
    };
    cfg.tokens.seed = a.seed;
    let trace = match &a.trace_in {
        Some(p) => RequestTrace::from_csv(&std::fs::read_to_string(p)?, &cfg.tokens)?,
        None => generate_trace(&cfg, &cost)?,
    };
    if let Some(p) = &a.trace_out {
        std::fs::write(p, trace.to_csv())?;
    }
    let policies: &[Policy] = match a.policy {
        PolicyChoice::Oblivious => &[Policy::Oblivious],
        PolicyChoice::Locality => &[Policy::Locality],
        PolicyChoice::Both => &[Policy::Oblivious, Policy::Locality],
    };
    let mut report = BenchReport::new("sched", &cfg);
    for &p in policies {
        let m = run_trace(&trace, p, cfg.instances, &cost).metrics;
        let series = serde_json::to_value(p)?.as_str().unwrap_or("policy").to_string();
        report.push(&series, "max_mean_load", m.max_mean_outstanding, "ratio");
        report.push(&series, "max_mean_completed", m.max_mean_completed, "ratio");
        report.push(&series, "p50_queue_delay", m.p50_queue_delay_us, "us");
        report.push(&series, "p99_queue_delay", m.p99_queue_delay_us, "us");
        report.push(&series, "hit_ratio", m.hit_ratio, "ratio");
        report.push(&series, "makespan", m.makespan_us, "us");
    }
    emit(&report, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn worker_cmd(w: WorkerCmd) -> CliResult {
    match w {
        WorkerCmd::RpcNonce { path, channel, config } => {
            let cfg: NonceConfig = serde_json::from_str(&config)?;
            print_json(&nonce_client(attach(&path)?, channel, &cfg))?;
        }
        WorkerCmd::IndexRace { path, client_id, hashes, seed } => {
            print_json(&index_race_client(attach(&path)?, client_id, hashes, seed))?;
        }
        WorkerCmd::ShmLoad { path, channel, qd, duration_ms } => {
            print_json(&shm_load_client(attach(&path)?, channel, qd, Duration::from_millis(duration_ms))?)?;
        }
        WorkerCmd::TcpLoad { addr, qd, duration_ms } => {
            print_json(&tcp_load_client(addr, qd, Duration::from_millis(duration_ms))?)?;
        }
        WorkerCmd::Alloc { path, count, host, hosts } => {
            let pool = attach(&path)?;
            let part = hosts.map(|n| HostPartition { host: host.unwrap_or(0), hosts: n });
            let mut offsets = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let a = match &part {
                    Some(p) => p.alloc(&pool)?,
                    None => pool.alloc_block()?,
                };
                offsets.push(a.offset);
            }
            print_json(&offsets)?;
        }
        WorkerCmd::Slots { path, channel } => {
            let pool = attach(&path)?;
            let geo = attach_channel(&pool, channel)?;
            let statuses: Vec<u64> = (0..geo.slot_count)
                .map(|i| pool.word(geo.status_off(i)).map(|w| w.load(Ordering::Acquire)))
                .collect::<Result<_, _>>()?;
            print_json(&statuses)?;
        }
        WorkerCmd::Attach { path } => {
            let pool = attach(&path)?;
            print_json(&serde_json::json!({ "header": pool.header_summary(), "channels": pool.channels() }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
