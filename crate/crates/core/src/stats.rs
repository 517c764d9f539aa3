//! Latency histogram with log-linear buckets, reported in microseconds.

use std::time::Duration;

use serde::{Deserialize, Serialize};

// 32 linear sub-buckets per power of two of nanoseconds: ~3% relative error.
const SUB_BITS: u32 = 5;
const SUB: u64 = 1 << SUB_BITS;
const GROUPS: usize = 64 - SUB_BITS as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    counts: Vec<u64>,
    total: u64,
    sum_ns: u128,
    min_ns: u64,
    max_ns: u64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        Self { counts: vec![0; GROUPS * SUB as usize], total: 0, sum_ns: 0, min_ns: u64::MAX, max_ns: 0 }
    }
}

fn bucket_of(ns: u64) -> usize {
    if ns < SUB {
        return ns as usize;
    }
    let msb = 63 - ns.leading_zeros();
    let group = (msb - SUB_BITS + 1) as usize;
    let sub = (ns >> (msb - SUB_BITS + 1)) - SUB / 2;
    // groups >= 1 use the upper half of their sub-bucket range
    group * SUB as usize / 2 + SUB as usize / 2 + sub as usize
}

fn bucket_low(b: usize) -> u64 {
    let half = SUB as usize / 2;
    if b < SUB as usize {
        return b as u64;
    }
    let group = (b - half) / half;
    let sub = ((b - half) % half) as u64 + SUB / 2;
    sub << group
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, d: Duration) {
        self.record_ns(d.as_nanos().min(u64::MAX as u128) as u64);
    }

    pub fn record_ns(&mut self, ns: u64) {
        let b = bucket_of(ns).min(self.counts.len() - 1);
        self.counts[b] += 1;
        self.total += 1;
        self.sum_ns += ns as u128;
        self.min_ns = self.min_ns.min(ns);
        self.max_ns = self.max_ns.max(ns);
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    pub fn merge(&mut self, other: &LatencyHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        self.sum_ns += other.sum_ns;
        self.min_ns = self.min_ns.min(other.min_ns);
        self.max_ns = self.max_ns.max(other.max_ns);
    }

    /// Value at quantile `q` in microseconds (lower bucket bound, clamped to
    /// the observed min/max). Zero when empty.
    pub fn percentile_us(&self, q: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let rank = ((q.clamp(0.0, 1.0) * self.total as f64).ceil() as u64).max(1);
        let mut seen = 0;
        for (b, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                let ns = bucket_low(b).clamp(self.min_ns, self.max_ns);
                return ns as f64 / 1000.0;
            }
        }
        self.max_ns as f64 / 1000.0
    }

    pub fn mean_us(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.sum_ns as f64 / self.total as f64 / 1000.0
        }
    }

    pub fn max_us(&self) -> f64 {
        self.max_ns as f64 / 1000.0
    }

    /// Non-empty buckets as `(lower bound in us, count)`.
    pub fn buckets_us(&self) -> Vec<(f64, u64)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(b, &c)| (bucket_low(b) as f64 / 1000.0, c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_zero() {
        let h = LatencyHistogram::new();
        assert_eq!(h.percentile_us(0.5), 0.0);
        assert_eq!(h.count(), 0);
    }

    #[test]
    fn exact_for_small_values() {
        let mut h = LatencyHistogram::new();
        for ns in 0..32 {
            h.record_ns(ns);
        }
        assert_eq!(h.percentile_us(0.5), 0.015);
    }

    #[test]
    fn median_of_uniform_sample() {
        let mut h = LatencyHistogram::new();
        for us in 1..=1000u64 {
            h.record_ns(us * 1000);
        }
        let p50 = h.percentile_us(0.5);
        assert!((p50 - 500.0).abs() / 500.0 < 0.04, "{p50}");
        let p99 = h.percentile_us(0.99);
        assert!((p99 - 990.0).abs() / 990.0 < 0.04, "{p99}");
    }

    proptest! {
        #[test]
        fn bucket_lower_bound_brackets_value(ns in 0u64..(1u64 << 50)) {
            let b = bucket_of(ns);
            prop_assert!(bucket_low(b) <= ns);
            prop_assert!(bucket_low(b + 1) > ns);
        }
    }
}
