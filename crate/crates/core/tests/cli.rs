use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("swarm-init-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swarm-init"))
}

#[test]
fn init_then_replay_round_trip() {
    let config = scratch("init.json");
    std::fs::write(
        &config,
        r#"{"world": {"n_drones": 3, "sensor_range": 30.0}, "pipeline": {"record_timings": false}}"#,
    )
    .unwrap();
    let report = scratch("report.json");
    let trace = scratch("trace.jsonl");
    let status = bin()
        .args(["init", "--seed", "5", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&report)
        .arg("--trace")
        .arg(&trace)
        .status()
        .unwrap();
    assert!(status.success() || status.code() == Some(2));
    let parsed: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(parsed["seed"], 5);
    assert_eq!(parsed["n_drones"], 3);

    let out = bin().arg("replay").arg("--trace").arg(&trace).output().unwrap();
    assert!(out.status.success());
    let replay: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(replay["epochs"], parsed["epochs_run"]);
}

#[test]
fn bench_writes_csv() {
    let config = scratch("bench.json");
    std::fs::write(
        &config,
        r#"{"benchmark": {"n_drones": [2, 3], "sigmas": [0.0], "trials": 2, "record_timings": false}}"#,
    )
    .unwrap();
    let csv = scratch("bench.csv");
    let status = bin()
        .arg("bench")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("method,n_drones,sigma,trial,yaw_mae,solve_time,converged")
    );
    assert_eq!(lines.count(), 2 * 2 * 3);
}

#[test]
fn invalid_config_is_rejected() {
    let config = scratch("bad.json");
    std::fs::write(&config, r#"{"world": {"n_drones": 1}}"#).unwrap();
    let out = bin().arg("init").arg("--config").arg(&config).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
