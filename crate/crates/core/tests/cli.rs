use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pharm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pharm"))
        .args(args)
        .env("PHARM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(pharm(&["gallery", "list"]).status.code(), Some(0));
    assert_eq!(pharm(&["check-conformal", "--map", "rotation"]).status.code(), Some(0));
    assert_eq!(pharm(&["check-conformal", "--map", "anisotropic-2d"]).status.code(), Some(1));
    assert_eq!(pharm(&["build-coords"]).status.code(), Some(2));
    assert_eq!(pharm(&["gallery", "emit", "no-such-item"]).status.code(), Some(2));
    assert_eq!(pharm(&["solve-dirichlet", "--metric", "flat", "--p", "0.5"]).status.code(), Some(2));
    assert_eq!(pharm(&["solve-dirichlet", "--metric", "flat", "--h", "0.5"]).status.code(), Some(2));
    assert_eq!(pharm(&["not-a-command"]).status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = pharm(&[
            "solve-dirichlet",
            "--metric",
            "bump-perturbed",
            "--p",
            "3",
            "--h",
            "0.0625",
            "--report",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(dir.path().join(format!("{name}.timing.json")).exists());
        std::fs::read(path).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn gallery_specs_round_trip_through_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for name in ["inversion", "conformal-exp"] {
        assert_eq!(pharm(&["gallery", "emit", name, "--out", d]).status.code(), Some(0));
    }
    let map = dir.path().join("inversion.json");
    let metric = dir.path().join("conformal-exp.json");

    let by_name = dir.path().join("by_name.json");
    let by_file = dir.path().join("by_file.json");
    pharm(&["check-conformal", "--map", "inversion", "--report", by_name.to_str().unwrap()]);
    pharm(&["check-conformal", "--map", map.to_str().unwrap(), "--report", by_file.to_str().unwrap()]);
    assert_eq!(read_json(&by_name)["report"], read_json(&by_file)["report"]);

    let report = dir.path().join("solve.json");
    let out = pharm(&[
        "solve-dirichlet",
        "--metric",
        metric.to_str().unwrap(),
        "--p",
        "2",
        "--h",
        "0.0625",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_json(&report)["pass"], Value::Bool(true));
}

#[test]
fn z_squared_has_positive_sign_and_degenerate_origin() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("z2.json");
    pharm(&[
        "check-conformal",
        "--map",
        "z-squared-2d",
        "--grid",
        "center=0,0;radius=1;h=0.05",
        "--report",
        report.to_str().unwrap(),
    ]);
    let r = read_json(&report);
    let d = &r["report"]["distortion"];
    assert_eq!(d["jacobian_sign"], "+1");
    let degenerate = d["degenerate_nodes"].as_array().unwrap();
    assert!(!degenerate.is_empty());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"map": "anisotropic-2d", "k-threshold": 2.5}"#).unwrap();
    let cfg = config.to_str().unwrap();
    assert_eq!(pharm(&["check-conformal", "--config", cfg]).status.code(), Some(0));
    assert_eq!(pharm(&["check-conformal", "--config", cfg, "--k-threshold", "1.5"]).status.code(), Some(1));

    std::fs::write(&config, r#"{"map": "rotation", "bogus": 1}"#).unwrap();
    assert_eq!(pharm(&["check-conformal", "--config", cfg]).status.code(), Some(2));
}

#[test]
fn field_output_is_readable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("u.csv");
    let out = pharm(&[
        "solve-dirichlet",
        "--metric",
        "flat",
        "--p",
        "2",
        "--h",
        "0.125",
        "--field-out",
        field.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rows = csv::Reader::from_path(&field).unwrap().records().count();
    assert!(rows > 0);
    let interp = pharm(&[
        "interp-check",
        "--field",
        field.to_str().unwrap(),
        "--a",
        "0.5",
        "--p",
        "2",
        "--margin",
        "0.2",
    ]);
    assert!(matches!(interp.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&interp.stderr));
}
