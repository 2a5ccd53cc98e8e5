use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "vehicle_count = 3\nlaps = 1\n";

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sim"))
        .args(args)
        .output()
        .expect("spawn sim")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("scenario.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = sim(&[
        "run",
        "--config",
        &config,
        "--mode",
        "baseline",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );

    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,vehicle_id,platoon_id,arc_s,x,y,v,u,delta,fuel_rate,cum_fuel,signal_"));
    // three vehicles per tick
    assert_eq!((csv.lines().count() - 1) % 3, 0);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "baseline");
    assert_eq!(summary["vehicle_fuel"].as_array().unwrap().len(), 3);

    for line in fs::read_to_string(out.join("events.jsonl")).unwrap().lines() {
        let e: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(e["type"].is_string());
    }
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = sim(&["validate", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
}

#[test]
fn invalid_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "vehicle_count = 0\n");
    let out = dir.path().join("out");
    let o = sim(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vehicle_count"));
    assert!(!out.join("trajectory.csv").exists());
}

#[test]
fn unknown_field_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "vehicle_cuont = 4\n");
    let o = sim(&["validate", "--config", &config]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vehicle_cuont"));
}

#[test]
fn validate_accepts_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = sim(&["validate", "--config", &config]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn compare_writes_both_runs_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("cmp");
    let o = sim(&["compare", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );

    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("comparison.json")).unwrap()).unwrap();
    let base = c["platoon_fuel_baseline"].as_f64().unwrap();
    let adv = c["platoon_fuel_advisory"].as_f64().unwrap();
    let tenths = (base - adv) / base * 1000.0;
    let expected = (tenths + 1e-9 * tenths.signum()).trunc() / 10.0;
    assert!((c["platoon_savings_pct"].as_f64().unwrap() - expected).abs() < 1e-9);
    for mode in ["advisory", "baseline"] {
        for f in ["trajectory.csv", "summary.json", "events.jsonl"] {
            assert!(out.join(mode).join(f).exists(), "{mode}/{f}");
        }
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Platoon Leader") && stdout.contains("Entire Platoon"));
}
