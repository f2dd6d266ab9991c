use std::path::Path;
use std::process::{Command, Output};

use lti_incentive::app::CSV_HEADER;

const SCALAR: &str = r#"
[system]
A = 0.9
B = 1.0
C = 1.0
mu_w = 0.0
sigma_w = 0.05
sigma_e = 0.05
mu_0 = 1.0
sigma_0 = 0.0

[controllers]
K_low = 0.0
K_high = -0.5

[agent]
gamma_a = 0.99
cost_gap = 1.0

[principal]
gamma_p = 0.995

[utility]
family = "sqrt"

[search]
T_max = 12
eta_grid_size = 128
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lti-incentive"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .expect("binary runs")
}

#[test]
fn design_writes_csv_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "scalar.toml", SCALAR);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_lti-incentive"))
        .args(["design", "--validate", "2000", "--seed", "3", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<_> = lines.collect();
    assert!(!rows.is_empty() && rows.len() <= 12);
    assert!(rows.iter().all(|r| r.split(',').count() == 7));
    assert!(!csv.contains('\r') && csv.ends_with('\n'));
    assert!(out.join("report.json").exists());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("T*"), "{text}");
}

#[test]
fn sweep_prints_to_stdout_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "scalar.toml", SCALAR);
    let o = run(&["sweep", "--t-max", "4"], &config);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with(CSV_HEADER));
    assert!(csv.lines().count() <= 5);
    let again = run(&["sweep", "--t-max", "4"], &config);
    assert_eq!(csv.as_bytes(), again.stdout.as_slice());
}

#[test]
fn validate_checks_a_saved_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "scalar.toml", SCALAR);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_lti-incentive"))
        .args(["design", "--config"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let v = Command::new(env!("CARGO_BIN_EXE_lti-incentive"))
        .args(["validate", "--validate", "5000", "--seed", "11", "--config"])
        .arg(&config)
        .arg("--solution")
        .arg(out.join("report.json"))
        .output()
        .unwrap();
    assert_eq!(
        v.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&v.stderr)
    );
    let json: serde_json::Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(json["samples"], 5000);
    assert_eq!(json["seed"], 11);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let broken = write_config(dir.path(), "broken.toml", "[system\nA = 1");
    let o = run(&["design"], &broken);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let missing = dir.path().join("absent.toml");
    assert_eq!(run(&["design"], &missing).status.code(), Some(2));

    let bad_discount = write_config(
        dir.path(),
        "gamma.toml",
        &SCALAR.replace("gamma_a = 0.99", "gamma_a = 1.2"),
    );
    let o = run(&["design"], &bad_discount);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gamma_a"));

    let general = run(
        &["design", "--liability", "general"],
        &write_config(dir.path(), "s.toml", SCALAR),
    );
    assert_eq!(general.status.code(), Some(2));
}

#[test]
fn infeasible_design_exits_with_3_and_writes_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let same = write_config(
        dir.path(),
        "same.toml",
        &SCALAR.replace("K_high = -0.5", "K_high = 0.0"),
    );
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_lti-incentive"))
        .args(["design", "--config"])
        .arg(&same)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(
        std::fs::read_to_string(out.join("sweep.csv")).unwrap(),
        format!("{CSV_HEADER}\n")
    );
    assert!(!out.join("report.json").exists());
}

#[test]
fn singular_output_law_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let text = SCALAR
        .replace("sigma_w = 0.05", "sigma_w = 0.0")
        .replace("sigma_e = 0.05", "sigma_e = 0.0");
    let config = write_config(dir.path(), "singular.toml", &text);
    let o = run(&["design"], &config);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
