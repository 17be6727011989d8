use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minkgeo"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn run_json(dir: &Path, args: &[&str]) -> Value {
    let mut a = vec!["--json"];
    a.extend_from_slice(args);
    let out = run(dir, &a);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_synthetic_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        run_json(d.path(), &["gen-synthetic", "--out", out, "--n", "6", "--seed", "4"]);
    }
    let rasters = |dir: &str| -> Vec<_> {
        tree(&d.path().join(dir)).into_iter().filter(|(n, _)| n.ends_with(".mgf")).collect()
    };
    let a = rasters("a");
    assert_eq!(a.len(), 6);
    assert_eq!(a, rasters("b"));
    assert!(d.path().join("a/manifest.json").exists());
    run_json(d.path(), &["gen-synthetic", "--out", "c", "--n", "6", "--seed", "5"]);
    assert_ne!(a, rasters("c"));
}

#[test]
fn pipeline_targets_then_untrained_constrained_eval() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run_json(p, &["gen-synthetic", "--out", "corpus", "--n", "12", "--height", "16", "--width", "16"]);
    let t = run_json(
        p,
        &["gen-targets", "--corpus", "corpus", "--out", "store", "--thresholds", "0.5,2,8"],
    );
    assert_eq!(t["count"], 12);
    assert!(p.join("store/resolved_config.json").exists());
    run_json(
        p,
        &[
            "train-emulator", "--arch", "constrained", "--data", "store", "--out", "ck",
            "--epochs", "0", "--hidden", "16",
        ],
    );
    let m = run_json(p, &["eval-emulator", "--ckpt", "ck", "--data", "store", "--out", "ev"]);
    assert_eq!(m["nu_iso"].as_f64(), Some(0.0));
    assert!(p.join("ev/metrics.json").exists());
    let manifest: Value = serde_json::from_slice(&fs::read(p.join("ck/manifest.json")).unwrap()).unwrap();
    assert!(manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .any(|f| f["file"] == "checkpoint.json"));
}

#[test]
fn invert_defaults_and_config_layering() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("target.json"), "[10, 4, 1, 3, 2, 1]").unwrap();
    let base = [
        "invert", "--target", "target.json", "--thresholds", "1,5", "--log-scale", "3", "--out",
    ];
    let mut a = base.to_vec();
    a.extend(["inv", "--steps", "3"]);
    let v = run_json(p, &a);
    assert_eq!(v["lr"], 0.1);
    assert_eq!(v["lambda_tv"], 1e-5);
    assert_eq!(v["lambda_l2"], 1e-6);
    let r: Value = serde_json::from_slice(&fs::read(p.join("inv/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(r["settings"]["steps"], 3);
    assert_eq!(r["settings"]["analytic"]["thresholds"], serde_json::json!([1.0, 5.0]));
    for f in ["trace.csv", "x_star.mgf", "x0.pgm", "x_star.pgm", "manifest.json"] {
        assert!(p.join("inv").join(f).exists(), "{f}");
    }
    let v = run_json(p, &["invert", "--target", "target.json", "--thresholds", "1,5", "--log-scale", "3", "--out", "inv2"]);
    assert_eq!(v["steps"], 200);

    fs::write(p.join("cfg.json"), r#"{"invert": {"steps": 2, "lr": 0.05}, "analytic": {"tau": 0.2}}"#).unwrap();
    let mut a = vec!["--config", "cfg.json"];
    a.extend(base);
    a.extend(["inv3", "--lr", "0.07"]);
    let v = run_json(p, &a);
    assert_eq!(v["steps"], 2);
    assert_eq!(v["lr"], 0.07);
    let r: Value = serde_json::from_slice(&fs::read(p.join("inv3/resolved_config.json")).unwrap()).unwrap();
    assert_eq!(r["settings"]["analytic"]["tau"], 0.2);
}

#[test]
fn validation_failures_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(run(p, &["invert", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(p, &["raps", "--model", "missing.mgf"]).status.code(), Some(2));
    fs::create_dir(p.join("bad")).unwrap();
    fs::write(p.join("bad/manifest.json"), "{not json").unwrap();
    assert_eq!(
        run(p, &["train-emulator", "--data", "bad", "--out", "ck"]).status.code(),
        Some(2)
    );
    assert_eq!(run(p, &["--workers", "0", "steiner-check"]).status.code(), Some(2));
    fs::write(p.join("cfg.json"), r#"{"steiner-check": {"bogus": 1}}"#).unwrap();
    assert_eq!(run(p, &["--config", "cfg.json", "steiner-check"]).status.code(), Some(2));
    assert_eq!(run(p, &["gen-synthetic", "--amp-max", "inf", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn raps_and_steiner_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run_json(p, &["gen-synthetic", "--out", "c", "--n", "2"]);
    let v = run_json(
        p,
        &["raps", "--model", "c/field_00000.mgf", "--reference", "c/field_00001.mgf", "--out", "r"],
    );
    assert!(v["raps_error"].as_f64().unwrap() > 0.0);
    assert!(p.join("r/spectrum.csv").exists() && p.join("r/ratio.csv").exists());
    let s = run_json(p, &["steiner-check", "--resolution", "512", "--out", "s"]);
    assert_eq!(s["passed"], true);
    assert!(p.join("s/steiner.csv").exists());
}

#[test]
fn help_states_units() {
    for cmd in [
        "gen-synthetic", "calibrate", "gen-targets", "train-emulator", "eval-emulator", "invert",
        "gradcheck", "mech-sweep", "steiner-check",
    ] {
        let out = bin().args([cmd, "--help"]).output().unwrap();
        assert!(out.status.success(), "{cmd}");
        let text = String::from_utf8_lossy(&out.stdout);
        let has_units = ["mm/h", "km", "pixels", "normalized", "dimensionless", "fraction", "epochs", "fields", "count"]
            .iter()
            .any(|u| text.contains(u));
        assert!(has_units, "{cmd} help has no units:\n{text}");
    }
}
