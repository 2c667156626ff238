use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn shapecorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapecorr")).args(args).output().unwrap()
}

fn json_ok(args: &[&str]) -> Value {
    let out = shapecorr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn synth(dir: &Path, family: &str, count: usize) -> String {
    let data = dir.join("data");
    let out = shapecorr(&[
        "synth",
        "--family",
        family,
        "--count",
        &count.to_string(),
        "--seed",
        "4",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.json").to_str().unwrap().to_string()
}

#[test]
fn unknown_family_lists_the_known_ones() {
    let out = shapecorr(&["synth", "--family", "teapot", "--seed", "1", "--out", "/nonexistent"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bent-capsule") && err.contains("sphere-radius"), "{err}");
}

#[test]
fn energy_check_reports_null_spaces() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "ellipsoid-axes", 2);
    let mesh = Path::new(&manifest).with_file_name("shape_001.ply");
    let mtx = dir.path().join("l.mtx");
    let r = json_ok(&[
        "energy-check",
        "--mesh",
        mesh.to_str().unwrap(),
        "--fields",
        "3",
        "--matrix-out",
        mtx.to_str().unwrap(),
    ]);
    assert!(r["arap_max_relative_error"].as_f64().unwrap() <= 1e-8);
    assert!(r["acap_max_relative_error"].as_f64().unwrap() <= 1e-8);
    assert!(r["rigid_arap"].as_f64().unwrap().abs() <= 1e-10);
    assert!(r["similarity_acap"].as_f64().unwrap().abs() <= 1e-10);
    assert!(r["scaling_arap"].as_f64().unwrap() > 0.0);
    assert!(std::fs::read_to_string(mtx).unwrap().starts_with("%%MatrixMarket"));
}

#[test]
fn correspond_accepts_negative_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "ellipsoid-axes", 2);
    let out = dir.path().join("moved.ply");
    let r = json_ok(&[
        "correspond",
        "--generator",
        &manifest,
        "--z",
        "-0.1,0.05,0",
        "--v",
        "1,0,-1",
        "--grid-n",
        "20",
        "--grid-half",
        "1.6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r["constraint_rows"].as_u64().unwrap() > 0);
    assert!(r["diagnostics"]["constraint_residual"].as_f64().unwrap() <= 1e-9);
    assert!(out.exists());
}

#[test]
fn staged_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "sphere-radius", 4);
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    json_ok(&["graph", "--manifest", &manifest, "--k", "2", "--iters", "10", "--out", &p("graph")]);
    let prop = json_ok(&["propagate", "--manifest", &manifest, "--graph", &p("graph"), "--out", &p("prop")]);
    assert_eq!(prop["paths"].as_array().unwrap().len(), 4);
    json_ok(&[
        "refine",
        "--manifest",
        &manifest,
        "--registered",
        &p("prop"),
        "--k",
        "2",
        "--steps",
        "5",
        "--out",
        &p("refined"),
    ]);
    let eval = json_ok(&[
        "evaluate",
        "--manifest",
        &manifest,
        "--pred",
        &p("refined"),
        "--errors-out",
        &p("errors"),
    ]);
    assert_eq!(eval["per_shape"].as_array().unwrap().len(), 3);
    assert!(eval["mean"].as_f64().unwrap() >= 0.0);
    assert!(dir.path().join("errors/shape_001.ply").exists());
}

#[test]
fn pipeline_requires_a_seed() {
    let out = shapecorr(&["pipeline", "--manifest", "m.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn pipeline_overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), "sphere-radius", 3);
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, r#"{"alpha": 3.0, "register_iters": 10, "grid_dims": [20, 20, 20]}"#).unwrap();
    let output = dir.path().join("run");
    let summary = json_ok(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "9",
        "--manifest",
        &manifest,
        "--output",
        output.to_str().unwrap(),
        "--set",
        "stages.stage3=false",
        "--set",
        "path_steps=2",
        "--set",
        "stage1_samples=1",
    ]);
    assert_eq!(summary["final_stage"], "stage2");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(output.join("report.json")).unwrap()).unwrap();
    let cfg = &report["config"];
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["alpha"], 3.0);
    assert_eq!(cfg["path_steps"], 2);
    assert_eq!(cfg["stages"]["stage3"], false);
    assert_eq!(cfg["stages"]["stage2"], true);

    let out = shapecorr(&["pipeline", "--seed", "1", "--manifest", &manifest, "--set", "alhpa=2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alhpa"));
}
