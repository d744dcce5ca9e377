use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn murmur(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_murmur")).args(args).output().expect("binary runs")
}

fn small_run(dir: &Path, guidance: &str) -> PathBuf {
    std::fs::write(dir.join("topo.json"), r#"{"grid": {"rows": 2, "cols": 2}}"#).unwrap();
    std::fs::write(
        dir.join("scenario.json"),
        r#"{"name": "short", "horizon": 12, "seed": 0, "events": [
            {"t": 0, "kind": "drought", "severity": 0.5, "duration": 5},
            {"t": 6, "kind": "flood", "severity": 0.9, "duration": 4}]}"#,
    )
    .unwrap();
    let cfg = dir.join("run.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"topology": "topo.json", "scenario": "scenario.json", "seed": 4,
                "env": {{"guidance": {guidance}}}, "hyper": {{"batch_size": 16, "epochs": 2, "update_every": 2}}}}"#
        ),
    )
    .unwrap();
    cfg
}

fn text(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn missing_topology_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"topology": "absent_topology.json", "seed": 1}"#).unwrap();
    let out_dir = dir.path().join("out");
    let o = murmur(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).expect("machine-readable error");
    assert!(err["path"].as_str().unwrap().ends_with("absent_topology.json"), "{err}");
}

#[test]
fn bad_usage_is_reported_as_json() {
    let o = murmur(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn variance_row_agrees_with_the_closed_form() {
    let o = murmur(&["validate-variance", "--chain", "10", "--alpha", "0.93", "--sigma", "0.05"]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    let row = stdout.lines().nth(1).unwrap();
    let rel: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!(rel < 0.05, "{row}");
}

#[test]
fn training_repeats_bit_for_bit_and_reruns_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), r#"{"kind": "builtin"}"#);
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let o = murmur(&["train", "--config", cfg, "--episodes", "10", "--seed", "1", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest = a.join("manifest.json");
    let o = murmur(&["rerun", "--manifest", manifest.to_str().unwrap(), "--out", c.to_str().unwrap(), "--workers", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train_log.csv", "trajectory.csv", "checkpoint.json", "metrics.json"] {
        assert_eq!(text(&a.join(f)), text(&b.join(f)), "{f}");
        assert_eq!(text(&a.join(f)), text(&c.join(f)), "{f} after rerun");
    }
    assert_eq!(text(&a.join("train_log.csv")).lines().count(), 11);
}

#[test]
fn simulate_then_eval_and_replay_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), r#"{"kind": "builtin"}"#);
    let cfg = cfg.to_str().unwrap();
    let trained = dir.path().join("trained");
    assert!(murmur(&["train", "--config", cfg, "--episodes", "4", "--out", trained.to_str().unwrap()]).status.success());
    let ckpt = trained.join("checkpoint.json");
    let sim = dir.path().join("sim");
    let o = murmur(&[
        "simulate",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--deterministic",
        "--out",
        sim.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trajectory.csv", "metrics.json", "manifest.json"] {
        assert!(sim.join(f).is_file(), "{f}");
    }
    let traj = sim.join("trajectory.csv");
    let o = murmur(&["eval", "--trajectory", traj.to_str().unwrap()]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let written: serde_json::Value = serde_json::from_str(&text(&sim.join("metrics.json"))).unwrap();
    assert_eq!(m, written);

    let replay = dir.path().join("replay");
    let manifest = sim.join("manifest.json");
    assert!(murmur(&["rerun", "--manifest", manifest.to_str().unwrap(), "--out", replay.to_str().unwrap()]).status.success());
    assert_eq!(text(&traj), text(&replay.join("trajectory.csv")));
}

#[test]
fn provider_from_the_environment_replaces_the_builtin_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), r#"{"kind": "builtin"}"#);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_murmur"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("MURMUR_GUIDANCE_CMD", "sleep 5")
        .env("MURMUR_GUIDANCE_TIMEOUT_MS", "50")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&text(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["config"]["env"]["guidance"]["command"], "sleep 5");
    // the severe flood is handled without the provider
    let flood_rows: Vec<String> = text(&out.join("trajectory.csv"))
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("6,") || l.starts_with("7,"))
        .map(|l| l.split(',').rev().take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert!(!flood_rows.is_empty());
    assert!(flood_rows.iter().all(|r| r == "0.1,0.8,0.1"), "{flood_rows:?}");
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = murmur(&["bench-scaling", "--sizes", "4,8", "--steps", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = text(&out.join("bench.csv"));
    assert!(csv.starts_with("nodes,median_step_ms,peak_mem_mb,slope\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.join("bench.json").is_file());
}

#[test]
fn ingest_writes_features_and_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("timestamp,node_id,inflow_m3s,temp_c,precip_mm,demand_m3s\n");
    for h in 0..48 {
        for node in ["r0c0", "r0c1"] {
            let inflow = 5.0 + f64::from(h) * 0.1;
            csv.push_str(&format!("2024-03-{:02}T{:02}:00:00Z,{node},{inflow},12.0,0.2,3.0\n", 1 + h / 24, h % 24));
        }
    }
    let input = dir.path().join("series.csv");
    std::fs::write(&input, csv).unwrap();
    let out = dir.path().join("features");
    let o = murmur(&["ingest", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["nodes"], 2);
    assert!(out.join("features.csv").is_file());
    assert!(out.join("normalization.json").is_file());
}
