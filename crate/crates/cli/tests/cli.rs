use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vce")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Demo config and data copied into `dir`, minus `drop`.
fn demo_copy(dir: &Path, drop: &[&str]) -> PathBuf {
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    for e in std::fs::read_dir(root().join("demo/data")).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().into_string().unwrap();
        if !drop.contains(&name.as_str()) {
            std::fs::copy(e.path(), data.join(&name)).unwrap();
        }
    }
    let mut cfg = read(&root().join("demo/config.json"));
    cfg["normalization"] = read(&root().join("config/normalization.json"));
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    p
}

#[test]
fn golden_report_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = root().join("demo/config.json");
    let out = vce(&["score", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let got = std::fs::read(dir.path().join("report.json")).unwrap();
    let want = std::fs::read(root().join("demo/expected/report.json")).unwrap();
    assert!(got == want, "report differs from demo/expected/report.json; run demo/regenerate.sh if intended");
}

#[test]
fn report_sections_populated() {
    let r = read(&root().join("demo/expected/report.json"));
    for k in [
        "meta", "data_depth", "estimates", "scenarios", "per_scenario", "metrics", "pi_bounds", "normalized", "vcs",
        "level3", "structural", "yield", "validation", "warnings",
    ] {
        assert!(!r[k].is_null(), "section {k} empty");
    }
    assert_eq!(r["meta"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(r["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("UNCALIBRATED")));
}

#[test]
fn missing_gas_scores_v5_zero_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_copy(dir.path(), &["gas.csv"]);
    let out_dir = dir.path().join("out");
    let out = vce(&["score", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = read(&out_dir.join("report.json"));
    assert_eq!(r["normalized"]["V5"]["score"].as_f64(), Some(0.0));
    assert_eq!(r["normalized"]["V5"]["worst_case"].as_bool(), Some(true));
    let warns: Vec<&str> = r["warnings"].as_array().unwrap().iter().map(|w| w.as_str().unwrap()).collect();
    assert!(warns.iter().any(|w| w.contains("gas missing, WORST-CASE")));
    assert!(warns.iter().any(|w| w.contains("V5 undefined")));
}

#[test]
fn csv_tables_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = root().join("demo/config.json");
    let out = vce(&["score", "--config", s(&cfg), "--out", s(dir.path()), "--format", "csv"]);
    assert!(out.status.success());
    for f in ["report.json", "metrics.csv", "scenarios.csv", "vcs.csv", "warnings.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let vcs = std::fs::read_to_string(dir.path().join("vcs.csv")).unwrap();
    assert!(vcs.starts_with("component,score,worst_case\n"));
    assert!(vcs.contains("VCS_mult"));
}

#[test]
fn errors_are_json_and_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_copy(dir.path(), &["snapshots.csv"]);
    let out_dir = dir.path().join("out");
    let out = vce(&["score", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"]["code"].is_string());
    assert!(v["error"]["message"].as_str().unwrap().contains("snapshots"));
    assert!(!out_dir.join("report.json").exists());
}

#[test]
fn relaxed_depth_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = demo_copy(dir.path(), &[]);
    let mut v = read(&cfg);
    v["ingest"] = serde_json::json!({ "depth_requirements": { "gas_days": 30.0 } });
    std::fs::write(&cfg, serde_json::to_vec(&v).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = vce(&["ingest", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    let e: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(e["error"]["code"], "config");
    let out = vce(&["ingest", "--config", s(&cfg), "--out", s(&out_dir), "--force"]);
    assert!(out.status.success());
    let cov = read(&out_dir.join("coverage.json"));
    let gas = cov["items"].as_array().unwrap().iter().find(|i| i["item"] == "gas").unwrap();
    assert_eq!(gas["status"], "PASS");
}

#[test]
fn stage_commands_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = root().join("demo/config.json");
    for (cmd, file) in [("estimate", "estimates.json"), ("stress", "scenarios.json"), ("backtest", "validation.json")] {
        let out = vce(&[cmd, "--config", s(&cfg), "--out", s(dir.path())]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stdout));
        // resolved config is echoed
        assert!(String::from_utf8_lossy(&out.stderr).contains("\"seed\""));
        assert!(dir.path().join(file).exists());
    }
    let set: Value = read(&dir.path().join("scenarios.json"));
    let set = set.as_array().unwrap();
    assert!(set.iter().all(|x| !x["consistency"].is_null()));
    assert!(set.iter().any(|x| x["kind"] == "adversarial"));
}

#[test]
fn custom_scenario_set_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = root().join("demo/config.json");
    let one = serde_json::json!([{
        "id": "custom-eth-40",
        "kind": "parametric",
        "price_shock": { "ETH": 0.4 },
        "depth_shock": { "ETH": 0.5 },
        "gas_quantile": 0.95,
        "horizon_hours": 24,
        "provenance": "test"
    }]);
    let sp = dir.path().join("set.json");
    std::fs::write(&sp, one.to_string()).unwrap();
    let out_dir = dir.path().join("o");
    let out = vce(&["score", "--config", s(&cfg), "--out", s(&out_dir), "--scenario-set", s(&sp), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let r = read(&out_dir.join("report.json"));
    assert_eq!(r["meta"]["seed"], 5);
    assert_eq!(r["scenarios"].as_array().unwrap().len(), 1);
    assert_eq!(r["components"]["v1"]["worst_scenario"], "custom-eth-40");
}

#[test]
fn simulate_reproduces_demo_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let w = root().join("demo/world.json");
    let out = vce(&["simulate", "--config", s(&w), "--seed", "7", "--out", s(dir.path())]);
    assert!(out.status.success());
    for e in std::fs::read_dir(root().join("demo/data")).unwrap() {
        let e = e.unwrap();
        let got = std::fs::read(dir.path().join(e.file_name())).unwrap();
        assert!(got == std::fs::read(e.path()).unwrap(), "{:?} differs", e.file_name());
    }
}
