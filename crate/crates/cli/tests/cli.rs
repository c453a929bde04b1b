//! End-to-end runs of the `ringqc` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn ringqc(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringqc")).args(args).arg("--out").arg(out).output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn minimal_budget_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("minimal.toml");
    let out = ringqc(&["budget", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b = json(&dir.path().join("budget.json"));
    for key in ["micromotion_displacement", "micromotion_amplitude", "ion_spacing", "pi_pulse_intensity", "gate_time_n100", "phonon_mode_spacing"] {
        assert!(b[key]["value"].is_f64(), "missing {key}");
    }
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["schema_version"], 1);
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
}

#[test]
fn pallas_reports_velocity_spacing_and_rate_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("pallas.toml");
    let out = ringqc(&["gates", "--config", cfg.to_str().unwrap(), "--json"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let g = &v["gates"];
    let vel = g["beam_velocity_m_s"].as_f64().unwrap();
    let spacing = g["ion_spacing_m"].as_f64().unwrap();
    let rate = g["arrival_rate_hz"].as_f64().unwrap();
    assert!((vel - 2840.0).abs() / 2840.0 < 0.01, "{vel}");
    assert!((spacing - 20.9e-6).abs() / 20.9e-6 < 0.01, "{spacing}");
    assert!((rate - 140e6).abs() / 140e6 < 0.03, "{rate}");
}

#[test]
fn malformed_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[species]\nname = \"Ca-40\"\n[ring\n").unwrap();
    let out = ringqc(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&cfg, "[species]\nname = \"Ca-40\"\ncolour = 1\n").unwrap();
    let out = ringqc(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn failed_validation_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v.toml");
    let text = format!(
        "include = {:?}\n[budget]\n[cooling]\nduration = 1e-3\nwarmup = 1e-4\ndt = 1e-6\n",
        scenario("common.toml").to_str().unwrap()
    );
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = ringqc(&["run", "--config", cfg.to_str().unwrap()], &out_dir);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cooling.dt"));
    assert!(!out_dir.exists());

    fs::write(&cfg, "[species]\nname = \"Xe-999\"\n[ring]\npreset = \"pallas\"\n").unwrap();
    let out = ringqc(&["run", "--config", cfg.to_str().unwrap()], &out_dir);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = scenario("minimal.toml");
    let out = ringqc(&["budget", "--config", cfg.to_str().unwrap()], &blocker);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn paper_check_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let out = ringqc(&["paper-check"], dir.path());
    assert!(out.status.success());
    let table = json(&dir.path().join("paper_check.json"));
    let rows = table["rows"].as_array().unwrap();
    let statuses: Vec<&str> = rows.iter().map(|r| r["status"].as_str().unwrap()).collect();
    assert_eq!(statuses.iter().filter(|s| **s == "paper_discrepancy").count(), 4);
    assert!(statuses.iter().all(|s| ["match", "paper_discrepancy", "not_reproducible"].contains(s)));

    let again = ringqc(&["paper-check"], dir.path());
    assert_eq!(out.stdout, again.stdout);

    let strict = ringqc(&["paper-check", "--tolerance-profile", "strict"], dir.path());
    assert_eq!(strict.status.code(), Some(5));
}

#[test]
fn seed_override_changes_tracking_only_through_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.toml");
    let text = format!(
        "include = {:?}\n[tracking]\nn_ions = 300\nevents = 5\n",
        scenario("common.toml").to_str().unwrap()
    );
    fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    let a = ringqc(&["track", "--config", c, "--seed", "1"], &dir.path().join("a"));
    let b = ringqc(&["track", "--config", c, "--seed", "1"], &dir.path().join("b"));
    let other = ringqc(&["track", "--config", c, "--seed", "2"], &dir.path().join("c"));
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, other.stdout);
    let pattern = fs::read_to_string(dir.path().join("a/pattern.txt")).unwrap();
    assert_eq!(pattern.trim().len(), 300);
}
