use std::fs;
use std::process::{Command, Output};

const EXE: &str = env!("CARGO_BIN_EXE_poolkv");

fn run(args: &[&str]) -> Output {
    Command::new(EXE).args(args).env_remove("POOLKV_PATH").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_profile_is_a_config_error() {
    assert_eq!(run(&["xfer", "bench", "--profile", "no-such-model"]).status.code(), Some(2));
}

#[test]
fn bad_arguments_are_config_errors() {
    assert_eq!(run(&["sched", "run", "--instances", "0"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "skew", "--op-size", "0"]).status.code(), Some(2));
    assert_eq!(run(&["pool", "stat"]).status.code(), Some(2));
}

#[test]
fn zero_duration_rpc_bench_is_empty() {
    let o = run(&["rpc", "bench", "--duration-ms", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "");
}

#[test]
fn reports_append_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for _ in 0..2 {
        assert!(run(&["bench", "skew", "--ops", "300", "--threads", "2", "--out", out]).status.success());
    }
    assert!(dir.path().join("skew-0.json").exists());
    assert!(dir.path().join("skew-1.json").exists());
    let csv = fs::read_to_string(dir.path().join("skew.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "benchmark,series,metric,value,unit");
    assert_eq!(lines.iter().filter(|l| l.starts_with("benchmark,")).count(), 1);
    let rows_per_run = (lines.len() - 1) / 2;
    assert!(rows_per_run > 0);
    for l in &lines[1..] {
        assert_eq!(l.split(',').count(), 5, "{l}");
        assert!(!l.split(',').nth(4).unwrap().is_empty(), "metric without unit: {l}");
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("skew-1.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["config"]["op_size"], 4096);
    assert!(json["environment"]["cpus"].as_u64().unwrap() >= 1);
}

#[test]
fn sched_trace_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let t = trace.to_str().unwrap();
    let a = run(&["sched", "run", "--requests", "500", "--seed", "4", "--trace-out", t]);
    assert!(a.status.success());
    let b = run(&["sched", "run", "--requests", "500", "--seed", "4", "--trace-in", t]);
    assert!(b.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert!(fs::read_to_string(&trace).unwrap().starts_with("arrival_us,prompt_id,shared_prefix_id,total_tokens"));
}

#[test]
fn verify_passes_and_mutation_fails() {
    let ok = run(&["verify", "--quick"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert_eq!(stdout(&ok).lines().filter(|l| l.starts_with("PASS")).count(), 7);
    let bad = run(&["verify", "--quick", "--break-read-fresh"]);
    assert_eq!(bad.status.code(), Some(1));
    let text = stdout(&bad);
    assert!(text.lines().any(|l| l.starts_with("FAIL coherence")), "{text}");
    assert!(text.contains("repro: poolkv verify --seed 1"));
}

#[test]
fn coherence_verify_is_deterministic() {
    let a = run(&["coh", "verify", "--schedules", "500", "--seed", "3"]);
    let b = run(&["coh", "verify", "--schedules", "500", "--seed", "3"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(run(&["coh", "verify", "--schedules", "500", "--break-read-fresh"]).status.code(), Some(1));
}

#[test]
fn pool_lifecycle_via_env_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pool");
    let with_env = |args: &[&str]| Command::new(EXE).args(args).env("POOLKV_PATH", &path).output().unwrap();
    assert!(with_env(&["pool", "create", "--mib", "8", "--block-bytes", "4096"]).status.success());
    let stat: serde_json::Value = serde_json::from_slice(&with_env(&["pool", "stat"]).stdout).unwrap();
    assert_eq!(stat["header"]["pool_bytes"], 8 * 1024 * 1024);
    assert_eq!(stat["device_write_bytes"].as_array().unwrap().len(), 4);
    let served = with_env(&["rpc", "serve", "--duration-ms", "50"]);
    assert!(served.status.success());
    let stat: serde_json::Value = serde_json::from_slice(&with_env(&["pool", "stat"]).stdout).unwrap();
    assert_eq!(stat["channels"][0]["id"], 1);
}

#[test]
fn index_server_answers_cli_queries() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.pool");
    let p = path.to_str().unwrap();
    assert!(run(&["pool", "create", "--path", p, "--mib", "8", "--block-bytes", "4096"]).status.success());
    let mut server = Command::new(EXE).args(["index", "serve", "--path", p, "--duration-ms", "3000"])
        .stdout(std::process::Stdio::null())
        .spawn().unwrap();
    let mut stat = None;
    for _ in 0..50 {
        std::thread::sleep(std::time::Duration::from_millis(50));
        let o = run(&["index", "stat", "--path", p]);
        if o.status.success() {
            stat = Some(stdout(&o));
            break;
        }
    }
    let stat: serde_json::Value = serde_json::from_str(&stat.expect("index server never answered")).unwrap();
    assert_eq!(stat["entries"], 0);
    let dump = run(&["index", "dump", "--path", p]);
    assert!(dump.status.success());
    assert_eq!(stdout(&dump), "");
    assert!(server.wait().unwrap().success());
}
