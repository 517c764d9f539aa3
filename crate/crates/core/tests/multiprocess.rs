use std::path::Path;
use std::process::{Command, Output, Stdio};

use poolkv::pool::{HeaderSummary, Pool, PoolConfig, MIB};
use poolkv::rpc::{create_channel, EMPTY};
use serde_json::Value;

const EXE: &str = env!("CARGO_BIN_EXE_poolkv");

fn worker(args: &[&str]) -> std::process::Child {
    Command::new(EXE).arg("worker").args(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().unwrap()
}

fn finish(out: Output) -> Value {
    assert!(out.status.success(), "worker failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn create(dir: &Path, mib: u64, block: u64) -> (Pool, String) {
    let path = dir.join("pool");
    let pool = Pool::create(PoolConfig::new(&path, mib * MIB, 4, block).with_chunk(2 * MIB)).unwrap();
    (pool, path.display().to_string())
}

#[test]
fn second_process_sees_same_header() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, path) = create(dir.path(), 16, 4096);
    create_channel(&pool, 1, 128, 64).unwrap();
    let v = finish(worker(&["attach", "--path", &path]).wait_with_output().unwrap());
    let header: HeaderSummary = serde_json::from_value(v["header"].clone()).unwrap();
    assert_eq!(header, pool.header_summary());
    assert_eq!(v["channels"].as_array().unwrap().len(), 1);
    assert_eq!(v["channels"][0]["slot_count"], 128);
}

#[test]
fn sixteen_concurrent_attaches() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, path) = create(dir.path(), 16, 4096);
    let children: Vec<_> = (0..16).map(|_| worker(&["attach", "--path", &path])).collect();
    let want = pool.header_summary();
    for c in children {
        let v = finish(c.wait_with_output().unwrap());
        assert_eq!(serde_json::from_value::<HeaderSummary>(v["header"].clone()).unwrap(), want);
    }
}

#[test]
fn attach_missing_path_is_an_error() {
    let out = Command::new(EXE).args(["pool", "attach", "--path", "/nonexistent/poolkv/pool"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(Pool::attach("/nonexistent/poolkv/pool").is_err());
}

fn assert_disjoint(mut offsets: Vec<u64>, block: u64, pool_bytes: u64) {
    offsets.sort_unstable();
    for w in offsets.windows(2) {
        assert!(w[0] + block <= w[1], "blocks at {} and {} overlap", w[0], w[1]);
    }
    assert!(offsets.last().unwrap() + block <= pool_bytes);
}

fn collect_offsets(children: Vec<std::process::Child>) -> Vec<u64> {
    children
        .into_iter()
        .flat_map(|c| {
            let v = finish(c.wait_with_output().unwrap());
            v.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn eight_processes_allocate_disjoint_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, path) = create(dir.path(), 64, 4096);
    let children: Vec<_> = (0..8).map(|_| worker(&["alloc", "--path", &path, "--count", "1000"])).collect();
    let offsets = collect_offsets(children);
    assert_eq!(offsets.len(), 8000);
    assert_disjoint(offsets.clone(), 4096, 64 * MIB);
    assert_eq!(pool.live_blocks(), 8000);
    for &o in &offsets {
        assert!(pool.is_allocated(poolkv::pool::PoolAddress::new(o, 4096)));
    }
}

#[test]
fn partitioned_hosts_allocate_inside_their_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, path) = create(dir.path(), 64, 4096);
    let hosts = 8u64;
    let per_host = pool.config().block_count() / hosts;
    let children: Vec<_> = (0..hosts)
        .map(|h| worker(&["alloc", "--path", &path, "--count", "1000", "--host", &h.to_string(), "--hosts", "8"]))
        .collect();
    let mut all = Vec::new();
    for (h, c) in children.into_iter().enumerate() {
        let offsets = collect_offsets(vec![c]);
        for &o in &offsets {
            assert_eq!(o / 4096 / per_host, h as u64, "offset {o} outside host {h}");
        }
        all.extend(offsets);
    }
    assert_disjoint(all, 4096, 64 * MIB);
}

#[test]
fn second_process_sees_empty_slots() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, path) = create(dir.path(), 16, 4096);
    create_channel(&pool, 1, 128, 64).unwrap();
    let v = finish(worker(&["slots", "--path", &path, "--channel", "1"]).wait_with_output().unwrap());
    let statuses: Vec<u64> = serde_json::from_value(v).unwrap();
    assert_eq!(statuses, vec![EMPTY; 128]);
}

#[test]
fn nonce_suite_with_processes_small() {
    let cfg = poolkv::workers::NonceSuiteConfig { calls_per_client: 2000, ..Default::default() };
    let rep = poolkv::workers::rpc_nonce_suite(Some(Path::new(EXE)), &cfg).unwrap();
    assert!(rep.processes);
    assert!(rep.bijection_holds(), "{rep:?}");
}
