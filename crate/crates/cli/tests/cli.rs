use std::fs;
use std::path::Path;
use std::process::Command;

fn sensor_reg(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_sensor-reg"))
        .current_dir(dir)
        .env("RUST_BACKTRACE", "0")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn simulate_then_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    sensor_reg(
        dir.path(),
        &[
            "simulate",
            "--algorithm",
            "alg4",
            "--sensors",
            "3",
            "--seed",
            "5",
            "--out",
            "b.csv",
        ],
    );
    assert!(dir.path().join("b.sensors.json").exists());
    assert!(dir.path().join("b.truth.json").exists());
    let header = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert!(header.starts_with("sensor_id,epoch_index,rng_m,az_rad,el_rad\n"));

    sensor_reg(
        dir.path(),
        &[
            "calibrate",
            "--batch",
            "b.csv",
            "--algorithm",
            "alg4",
            "--out",
            "r.json",
        ],
    );
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(result["result"]["estimates"].as_array().unwrap().len(), 3);
    assert_eq!(result["result"]["converged"], true);
}

#[test]
fn experiment_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"mc_runs": 9, "sensors": {"count": 5}, "noise": {"sigma_az_mrad": 1.0}}"#,
    )
    .unwrap();
    let stdout = sensor_reg(
        dir.path(),
        &[
            "experiment",
            "--config",
            "cfg.json",
            "--mc-runs",
            "3",
            "--sensors",
            "4",
            "--out-dir",
            "out",
        ],
    );
    assert!(stdout.contains("alg4 S=4 runs=3"), "{stdout}");
    let rows = fs::read_to_string(dir.path().join("out/runs.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows, 3 * 4 + 1);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["noise"]["sigma_az_mrad"], 1.0);
}

#[test]
fn sweep_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    sensor_reg(
        dir.path(),
        &[
            "sweep",
            "--axis",
            "noise_std",
            "--values",
            "1,2",
            "--mc-runs",
            "2",
            "--sensors",
            "3",
            "--out-dir",
            "s",
        ],
    );
    let text = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn bad_algorithm_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sensor-reg"))
        .current_dir(dir.path())
        .args(["experiment", "--algorithm", "alg6", "--sensors", "3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alg6 requires exactly 2 2D sensors"));
}
