use std::fs;
use std::process::{Command, Output};

fn enkf_rare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enkf-rare")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn run_writes_summary_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("convex");
    let out = enkf_rare(&[
        "run", "--problem", "convex", "--J", "300", "--trials", "3", "--seed", "5", "--out",
        out_dir.to_str().unwrap(),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["config"]["trials"], 3);
    assert_eq!(summary["n_errors"], 0);
    for f in ["trials.csv", "summary.json", "model.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out_dir.join("trials.csv")).unwrap().lines().count(), 4);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"problem": "affine(1,0,-2)", "j": 200, "trials": 5, "localization": {"mode": "fixed", "alpha": 2.0}}"#).unwrap();
    let out = enkf_rare(&["run", "--config", cfg.to_str().unwrap(), "--trials", "2", "--deterministic"]);
    let summary: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(summary["config"]["trials"], 2);
    assert_eq!(summary["config"]["j"], 200);
    assert_eq!(summary["config"]["localization"]["alpha"], 2.0);
}

#[test]
fn theory_prints_the_trajectory() {
    let out = enkf_rare(&["theory", "--b", "-2", "--J", "2000", "--t-end", "1", "--dt", "0.01", "--times", "0.5"]);
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "t,m_1,m_2,C_11,failure_fraction");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("1,"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prediction"));
}

#[test]
fn curves_and_mc() {
    let text = stdout(&enkf_rare(&["curves", "--sigma", "0.1,1", "--points", "5"]));
    assert_eq!(text.lines().count(), 11);
    let mc: serde_json::Value =
        serde_json::from_str(&stdout(&enkf_rare(&["mc", "--problem", "affine(1,-2)", "--samples", "200000"]))).unwrap();
    assert!((mc["pf"].as_f64().unwrap() - 0.0227501).abs() < 4.0 * mc["std_error"].as_f64().unwrap());
}

#[test]
fn bad_input_is_reported() {
    assert!(!enkf_rare(&["run", "--problem", "nonesuch", "--trials", "2"]).status.success());
    assert!(!enkf_rare(&["run", "--local", "--adaptive-K", "2"]).status.success());
    assert!(!enkf_rare(&["theory", "--b", "1"]).status.success());
    assert!(!enkf_rare(&["theory", "--mode", "sideways"]).status.success());
}
