//! Trace-driven comparison of cache-oblivious dispatch with a locality-aware
//! baseline.
//!
//! Every request is served FIFO by one instance. Prefix blocks live in the
//! shared pool, so a cached block is a hit no matter which instance serves the
//! request. Service time is `base + miss_penalty * (1 - hit_fraction)`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use rustc_hash::{FxHashMap, FxHashSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{prompt_hashes, BlockHash};

pub const BLOCK_TOKENS: usize = 16;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("trace line {line}: {msg}")]
    BadTrace { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Oblivious,
    Locality,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub base_us: f64,
    pub miss_penalty_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { base_us: 50.0, miss_penalty_us: 950.0 }
    }
}

impl CostModel {
    pub fn service_us(&self, hit_fraction: f64) -> f64 {
        self.base_us + self.miss_penalty_us * (1.0 - hit_fraction)
    }
}

/// Parameters that turn `(shared_prefix_id, prompt_id, total_tokens)` into
/// token ids. Shared with trace files so they can be replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenModel {
    pub seed: u64,
    pub prefix_tokens: u32,
    pub vocab: u32,
}

impl TokenModel {
    pub fn tokens(&self, shared_prefix_id: u64, prompt_id: u64, total_tokens: u32) -> Vec<u32> {
        let shared = self.prefix_tokens.min(total_tokens) as usize;
        let mut out = Vec::with_capacity(total_tokens as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ shared_prefix_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        out.extend((0..shared).map(|_| rng.random_range(0..self.vocab)));
        let mut rng = ChaCha8Rng::seed_from_u64(!self.seed ^ prompt_id.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
        out.extend((shared..total_tokens as usize).map(|_| rng.random_range(0..self.vocab)));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub arrival_us: u64,
    pub prompt_id: u64,
    pub shared_prefix_id: u64,
    pub total_tokens: u32,
    pub tokens: Vec<u32>,
}

/// Requests in non-decreasing arrival order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestTrace {
    pub requests: Vec<Request>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub requests: usize,
    pub instances: usize,
    pub zipf_s: f64,
    pub prefixes: u64,
    pub suffix_tokens_max: u32,
    /// Offered load relative to the instances' capacity.
    pub utilization: f64,
    pub tokens: TokenModel,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            requests: 10_000,
            instances: 16,
            zipf_s: 0.99,
            prefixes: 1000,
            suffix_tokens_max: 128,
            utilization: 0.98,
            tokens: TokenModel { seed: 1, prefix_tokens: 512, vocab: 32_000 },
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        let bad = |m: &str| Err(SchedError::InvalidConfig(m.to_string()));
        if self.instances == 0 {
            return bad("instances must be >= 1");
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return bad("zipf exponent must be finite and >= 0");
        }
        if self.prefixes == 0 || self.tokens.vocab == 0 {
            return bad("prefixes and vocab must be >= 1");
        }
        if !(self.utilization > 0.0 && self.utilization.is_finite()) {
            return bad("utilization must be > 0");
        }
        Ok(())
    }
}

/// Draws prefix ids from Zipf(`zipf_s`) and spaces arrivals exponentially so
/// that the offered work matches `utilization` of the instances.
pub fn generate_trace(cfg: &TraceConfig, cost: &CostModel) -> Result<RequestTrace, SchedError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.tokens.seed);
    let zipf = Zipf::new(cfg.prefixes as f64, cfg.zipf_s).map_err(|e| SchedError::InvalidConfig(e.to_string()))?;
    let mut requests = Vec::with_capacity(cfg.requests);
    for prompt_id in 0..cfg.requests as u64 {
        let shared_prefix_id = zipf.sample(&mut rng) as u64 - 1;
        let total_tokens = cfg.tokens.prefix_tokens + rng.random_range(1..=cfg.suffix_tokens_max.max(1));
        let tokens = cfg.tokens.tokens(shared_prefix_id, prompt_id, total_tokens);
        requests.push(Request { arrival_us: 0, prompt_id, shared_prefix_id, total_tokens, tokens });
    }
    // arrival spacing does not change which blocks hit, so the offered work
    // can be measured before arrivals are assigned
    let work: f64 = service_times(&requests, cost).iter().sum();
    if !requests.is_empty() {
        let mean_gap = work / requests.len() as f64 / (cfg.instances as f64 * cfg.utilization);
        let exp = Exp::new(1.0 / mean_gap.max(1e-9)).map_err(|e| SchedError::InvalidConfig(e.to_string()))?;
        let mut t = 0.0f64;
        for r in &mut requests {
            t += exp.sample(&mut rng);
            r.arrival_us = t as u64;
        }
    }
    Ok(RequestTrace { requests })
}

fn service_times(requests: &[Request], cost: &CostModel) -> Vec<f64> {
    let mut cache = PoolCache::default();
    requests.iter().map(|r| cost.service_us(cache.admit(&prompt_hashes(&r.tokens, BLOCK_TOKENS)))).collect()
}

/// Blocks resident in the shared pool; unbounded.
#[derive(Default)]
struct PoolCache {
    blocks: FxHashSet<BlockHash>,
}

impl PoolCache {
    /// Returns the cached fraction of the prompt's leading blocks, then
    /// caches the whole prompt.
    fn admit(&mut self, hashes: &[BlockHash]) -> f64 {
        let hit = hashes.iter().take_while(|h| self.blocks.contains(h)).count();
        self.blocks.extend(hashes.iter().copied());
        if hashes.is_empty() {
            0.0
        } else {
            hit as f64 / hashes.len() as f64
        }
    }
}

impl RequestTrace {
    pub const CSV_HEADER: &'static str = "arrival_us,prompt_id,shared_prefix_id,total_tokens";

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.requests.len() * 32);
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.requests {
            let _ = writeln!(s, "{},{},{},{}", r.arrival_us, r.prompt_id, r.shared_prefix_id, r.total_tokens);
        }
        s
    }

    /// Parses the CSV form; token ids are regenerated from `model`.
    pub fn from_csv(text: &str, model: &TokenModel) -> Result<Self, SchedError> {
        let mut requests = Vec::new();
        let mut last = 0u64;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line == Self::CSV_HEADER {
                continue;
            }
            let bad = |msg: &str| SchedError::BadTrace { line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad("not an unsigned integer"));
            let (arrival_us, prompt_id, shared_prefix_id) = (num(f[0])?, num(f[1])?, num(f[2])?);
            let total_tokens = u32::try_from(num(f[3])?).map_err(|_| bad("total_tokens too large"))?;
            if arrival_us < last {
                return Err(bad("arrival times must be non-decreasing"));
            }
            last = arrival_us;
            let tokens = model.tokens(shared_prefix_id, prompt_id, total_tokens);
            requests.push(Request { arrival_us, prompt_id, shared_prefix_id, total_tokens, tokens });
        }
        Ok(Self { requests })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceState {
    pub instance_id: usize,
    pub completed: u64,
    pub busy_us: f64,
    in_flight: VecDeque<f64>,
    outstanding_area: f64,
    last_event: f64,
}

impl InstanceState {
    pub fn new(instance_id: usize) -> Self {
        Self {
            instance_id,
            completed: 0,
            busy_us: 0.0,
            in_flight: VecDeque::new(),
            outstanding_area: 0.0,
            last_event: 0.0,
        }
    }

    pub fn outstanding(&self) -> usize {
        self.in_flight.len()
    }

    fn advance(&mut self, now: f64) {
        while let Some(&end) = self.in_flight.front() {
            if end > now {
                break;
            }
            self.outstanding_area += self.in_flight.len() as f64 * (end - self.last_event);
            self.last_event = end;
            self.in_flight.pop_front();
            self.completed += 1;
        }
        self.outstanding_area += self.in_flight.len() as f64 * (now - self.last_event).max(0.0);
        self.last_event = self.last_event.max(now);
    }

    /// Queues a request arriving at `now`; returns its start time.
    fn enqueue(&mut self, now: f64, service_us: f64) -> f64 {
        let start = self.in_flight.back().copied().unwrap_or(now).max(now);
        self.in_flight.push_back(start + service_us);
        self.busy_us += service_us;
        start
    }

    /// Test helper: pretends `n` requests are queued.
    pub fn with_outstanding(mut self, n: usize) -> Self {
        self.in_flight.extend(std::iter::repeat_n(f64::INFINITY, n));
        self
    }
}

/// Least outstanding requests, ties to the lowest id. Never inspects the
/// request.
pub fn dispatch_oblivious(instances: &[InstanceState]) -> usize {
    instances
        .iter()
        .min_by_key(|s| (s.outstanding(), s.instance_id))
        .map(|s| s.instance_id)
        .expect("at least one instance")
}

/// Owner of the longest owned prefix of `hashes`; least-loaded when no
/// leading block has an owner.
pub fn dispatch_locality(
    hashes: &[BlockHash],
    instances: &[InstanceState],
    owners: &FxHashMap<BlockHash, usize>,
) -> usize {
    let mut owner = None;
    for h in hashes {
        match owners.get(h) {
            Some(&o) => owner = Some(o),
            None => break,
        }
    }
    owner.unwrap_or_else(|| dispatch_oblivious(instances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub policy: Policy,
    pub requests: u64,
    pub instances: usize,
    /// max / mean of requests completed per instance
    pub max_mean_completed: f64,
    /// max / mean of time-averaged outstanding requests per instance; the
    /// load-imbalance figure
    pub max_mean_outstanding: f64,
    pub p50_queue_delay_us: f64,
    pub p99_queue_delay_us: f64,
    pub hit_ratio: f64,
    pub makespan_us: f64,
    pub completed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub metrics: SimMetrics,
    pub assignments: Vec<usize>,
}

fn max_over_mean(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    if mean == 0.0 {
        0.0
    } else {
        v.iter().cloned().fold(0.0, f64::max) / mean
    }
}

/// Nearest-rank percentile over an ascending sample.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn run_trace(trace: &RequestTrace, policy: Policy, instances: usize, cost: &CostModel) -> SimOutcome {
    assert!(instances >= 1, "at least one instance");
    let mut state: Vec<InstanceState> = (0..instances).map(InstanceState::new).collect();
    let mut owners: FxHashMap<BlockHash, usize> = FxHashMap::default();
    let mut cache = PoolCache::default();
    let mut delays = Vec::with_capacity(trace.len());
    let mut assignments = Vec::with_capacity(trace.len());
    let mut hit_sum = 0.0;
    for r in &trace.requests {
        let now = r.arrival_us as f64;
        for s in &mut state {
            s.advance(now);
        }
        let hashes = prompt_hashes(&r.tokens, BLOCK_TOKENS);
        let target = match policy {
            Policy::Oblivious => dispatch_oblivious(&state),
            Policy::Locality => dispatch_locality(&hashes, &state, &owners),
        };
        if policy == Policy::Locality {
            for h in &hashes {
                owners.entry(*h).or_insert(target);
            }
        }
        let hit = cache.admit(&hashes);
        hit_sum += hit;
        let start = state[target].enqueue(now, cost.service_us(hit));
        delays.push(start - now);
        assignments.push(target);
    }
    let end = state.iter().filter_map(|s| s.in_flight.back().copied()).fold(0.0, f64::max);
    for s in &mut state {
        s.advance(end);
    }
    delays.sort_by(f64::total_cmp);
    let completed: Vec<u64> = state.iter().map(|s| s.completed).collect();
    let loads: Vec<f64> = completed.iter().map(|&c| c as f64).collect();
    let outstanding: Vec<f64> =
        state.iter().map(|s| if end > 0.0 { s.outstanding_area / end } else { 0.0 }).collect();
    let n = trace.len();
    let metrics = SimMetrics {
        policy,
        requests: n as u64,
        instances,
        max_mean_completed: max_over_mean(&loads),
        max_mean_outstanding: max_over_mean(&outstanding),
        p50_queue_delay_us: percentile(&delays, 0.50),
        p99_queue_delay_us: percentile(&delays, 0.99),
        hit_ratio: if n == 0 { 0.0 } else { hit_sum / n as f64 },
        makespan_us: end,
        completed,
    };
    SimOutcome { metrics, assignments }
}

/// Applies a bijection on token ids to every prompt, keeping arrivals.
pub fn relabel_tokens(trace: &RequestTrace, vocab: u32, seed: u64) -> RequestTrace {
    use rand::seq::SliceRandom;
    let mut perm: Vec<u32> = (0..vocab).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = trace.clone();
    for r in &mut out.requests {
        for t in &mut r.tokens {
            *t = perm[*t as usize];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64, zipf_s: f64) -> TraceConfig {
        TraceConfig {
            requests: 2000,
            zipf_s,
            tokens: TokenModel { seed, prefix_tokens: 64, vocab: 1000 },
            ..TraceConfig::default()
        }
    }

    #[test]
    fn ties_round_robin() {
        let mut st: Vec<InstanceState> = (0..4).map(InstanceState::new).collect();
        let mut counts = [0; 4];
        for _ in 0..8 {
            let i = dispatch_oblivious(&st);
            counts[i] += 1;
            st[i].enqueue(0.0, 10.0);
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn least_outstanding_wins() {
        let st: Vec<InstanceState> =
            [3, 1, 2].iter().enumerate().map(|(i, &n)| InstanceState::new(i).with_outstanding(n)).collect();
        assert_eq!(dispatch_oblivious(&st), 1);
    }

    #[test]
    fn locality_follows_owner_regardless_of_load() {
        let st: Vec<InstanceState> = (0..8).map(|i| InstanceState::new(i).with_outstanding(if i == 5 { 9 } else { 0 })).collect();
        let hashes = prompt_hashes(&(0..48).collect::<Vec<u32>>(), 16);
        let mut owners = FxHashMap::default();
        owners.insert(hashes[0], 5);
        assert_eq!(dispatch_locality(&hashes, &st, &owners), 5);
        owners.insert(hashes[1], 2);
        assert_eq!(dispatch_locality(&hashes, &st, &owners), 2);
        assert_eq!(dispatch_locality(&hashes, &st, &FxHashMap::default()), 0);
    }

    #[test]
    fn empty_trace_zero_metrics() {
        let m = run_trace(&RequestTrace::default(), Policy::Oblivious, 4, &CostModel::default()).metrics;
        assert_eq!((m.requests, m.max_mean_outstanding, m.p99_queue_delay_us, m.hit_ratio), (0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn deterministic_and_conserving() {
        let cost = CostModel::default();
        let t = generate_trace(&small_cfg(3, 0.99), &cost).unwrap();
        assert!(t.requests.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us));
        assert_eq!(t, generate_trace(&small_cfg(3, 0.99), &cost).unwrap());
        for p in [Policy::Oblivious, Policy::Locality] {
            let a = run_trace(&t, p, 16, &cost);
            assert_eq!(a, run_trace(&t, p, 16, &cost));
            assert_eq!(a.metrics.completed.iter().sum::<u64>(), t.len() as u64);
        }
    }

    #[test]
    fn no_cached_prefixes_behaves_oblivious() {
        let cost = CostModel::default();
        let mut cfg = small_cfg(4, 0.99);
        // every prompt shorter than one block: nothing is ever owned
        cfg.tokens.prefix_tokens = 0;
        cfg.suffix_tokens_max = 15;
        let t = generate_trace(&cfg, &cost).unwrap();
        let a = run_trace(&t, Policy::Oblivious, 16, &cost);
        let b = run_trace(&t, Policy::Locality, 16, &cost);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn oblivious_ignores_token_content() {
        let cost = CostModel::default();
        let t = generate_trace(&small_cfg(5, 0.99), &cost).unwrap();
        let r = relabel_tokens(&t, 1000, 99);
        assert_ne!(t.requests[0].tokens, r.requests[0].tokens);
        assert_eq!(
            run_trace(&t, Policy::Oblivious, 16, &cost).assignments,
            run_trace(&r, Policy::Oblivious, 16, &cost).assignments
        );
    }

    #[test]
    fn csv_roundtrip() {
        let cost = CostModel::default();
        let cfg = small_cfg(6, 0.5);
        let t = generate_trace(&cfg, &cost).unwrap();
        let back = RequestTrace::from_csv(&t.to_csv(), &cfg.tokens).unwrap();
        assert_eq!(back, t);
        assert!(RequestTrace::from_csv("5,0,0,10\n4,1,0,10\n", &cfg.tokens).is_err());
        assert!(RequestTrace::from_csv("1,2,3\n", &cfg.tokens).is_err());
    }

    #[test]
    fn zipf_zero_is_uniform() {
        let cost = CostModel::default();
        let mut cfg = small_cfg(7, 0.0);
        cfg.requests = 20_000;
        cfg.prefixes = 10;
        let t = generate_trace(&cfg, &cost).unwrap();
        let mut counts = [0u32; 10];
        for r in &t.requests {
            counts[r.shared_prefix_id as usize] += 1;
        }
        // chi-square with 9 degrees of freedom; 27.9 is the 0.999 quantile
        let e = 2000.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 27.9, "{counts:?}");
    }

    #[test]
    fn paired_simulation_shipped_seeds() {
        let cost = CostModel::default();
        for seed in 1..=3 {
            let cfg = TraceConfig { tokens: TokenModel { seed, ..TraceConfig::default().tokens }, ..TraceConfig::default() };
            let t = generate_trace(&cfg, &cost).unwrap();
            let a = run_trace(&t, Policy::Oblivious, 16, &cost).metrics;
            let b = run_trace(&t, Policy::Locality, 16, &cost).metrics;
            assert!(a.max_mean_outstanding <= 1.15, "seed {seed}: {a:?}");
            assert!(b.max_mean_outstanding >= 1.5, "seed {seed}: {b:?}");
            assert!(a.p99_queue_delay_us <= b.p99_queue_delay_us, "seed {seed}");
            assert_eq!(a.hit_ratio, b.hit_ratio);
        }
        let uniform = TraceConfig { zipf_s: 0.0, ..TraceConfig::default() };
        let t = generate_trace(&uniform, &cost).unwrap();
        assert!(run_trace(&t, Policy::Oblivious, 16, &cost).metrics.max_mean_outstanding <= 1.15);
    }

    #[test]
    fn invalid_configs() {
        let cost = CostModel::default();
        for cfg in [
            TraceConfig { instances: 0, ..TraceConfig::default() },
            TraceConfig { zipf_s: -1.0, ..TraceConfig::default() },
            TraceConfig { utilization: 0.0, ..TraceConfig::default() },
        ] {
            assert!(generate_trace(&cfg, &cost).is_err());
        }
    }
}

