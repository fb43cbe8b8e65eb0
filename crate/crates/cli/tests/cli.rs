use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn mmfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmfl")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn run_creates_missing_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nested/run");
    let cfg = smoke();
    let res = mmfl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--method", "stalevre"]);
    ok(&res);
    let metrics = std::fs::read_to_string(out.join("stalevre_seed0_metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("round,model,"));
    // Round 0 plus five rounds, two models each.
    assert_eq!(lines.count(), 12);
    assert!(out.join("stalevre_summary.toml").exists());
}

#[test]
fn compare_writes_aligned_streams_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke();
    let res = mmfl(&["compare", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--seeds", "0,1"]);
    ok(&res);
    let joined = std::fs::read_to_string(tmp.path().join("compare_accuracy.csv")).unwrap();
    assert_eq!(joined.lines().next().unwrap(), "round,model,random,lvr,stalevr,full");
    let rows: Vec<&str> = joined.lines().skip(1).collect();
    // Evaluations at rounds 0, 2, 4 and 5 for two models.
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').count() == 6));
    let summary: toml::Table = std::fs::read_to_string(tmp.path().join("compare_summary.toml")).unwrap().parse().unwrap();
    let methods = summary["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 4);
    for m in methods {
        assert!(m["relative_accuracy"].as_float().unwrap() > 0.0);
    }
    for method in ["random", "lvr", "stalevr", "full"] {
        for seed in [0, 1] {
            assert!(tmp.path().join(format!("{method}_seed{seed}_metrics.csv")).exists());
        }
    }
}

#[test]
fn verify_passes() {
    let res = mmfl(&["verify", "constraints"]);
    ok(&res);
    assert!(String::from_utf8_lossy(&res.stdout).contains("[PASS]"));
}

#[test]
fn unknown_suite_fails() {
    assert!(!mmfl(&["verify", "nope"]).status.success());
}

#[test]
fn gen_data_writes_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke();
    ok(&mmfl(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]));
    let topo = std::fs::read_to_string(tmp.path().join("topology.csv")).unwrap();
    assert_eq!(topo.lines().count(), 11);
    assert!(tmp.path().join("model0/test.csv").exists());
    assert!(tmp.path().join("model1").is_dir());
}

#[test]
fn invalid_config_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "num_clients = 0\nactive_rate = 2.0\n").unwrap();
    let res = mmfl(&["run", "--config", bad.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("num_clients") && err.contains("active_rate"), "{err}");

    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    assert!(!mmfl(&["run", "--config", bad.to_str().unwrap()]).status.success());
}
