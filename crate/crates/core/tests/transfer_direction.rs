use poolkv::bench::{bench_transfer, Baseline, TransferBenchConfig, TransferMode};
use poolkv::transfer::{builtin_presets, find_preset};

/// Paired run on one machine: the direct path beats the two-hop staged path
/// at every block size of the sweep, and moves half the bytes.
#[test]
fn direct_beats_staged_at_every_size() {
    let q = find_preset(&builtin_presets(), "qwen32b-like").unwrap();
    let mut cfg = TransferBenchConfig::new(q, TransferMode::Dense, Baseline::Staged);
    cfg.iterations = 15;
    let rep = bench_transfer(&cfg).unwrap();
    let series: Vec<String> = rep.metrics.iter().map(|m| m.series.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    assert_eq!(series.len(), cfg.tokens_sweep.len());
    for s in &series {
        let get = |m: &str| rep.get(s, m).unwrap();
        assert!(get("write_direct_p50") < get("write_staged_p50"), "{s} write: {rep:?}");
        assert!(get("read_direct_p50") < get("read_staged_p50"), "{s} read: {rep:?}");
        assert_eq!(2.0 * get("bytes_direct"), get("bytes_staged"));
    }
}
