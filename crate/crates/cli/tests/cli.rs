use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const PIPELINE: [&str; 5] = ["synth", "splits", "train-emoforensics", "train-emoboost", "eval"];

fn example_config() -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json");
    let mut v: Value = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("out_dir");
    obj.remove("report");
    v
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn run(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoboost"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .unwrap()
}

fn run_ok(cmd: &str, config: &Path, out: &Path) {
    let o = run(cmd, config, &["--out", out.to_str().unwrap()]);
    assert!(
        o.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn full_pipeline(dir: &Path) -> Vec<u8> {
    let config = write_config(dir, &example_config());
    let out = dir.join("out");
    for cmd in PIPELINE {
        run_ok(cmd, &config, &out);
    }
    fs::read(out.join("reports/eval.json")).unwrap()
}

#[test]
fn pipeline_report_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_pipeline(a.path());
    let rb = full_pipeline(b.path());
    assert_eq!(ra, rb);

    let reports: Vec<Value> = serde_json::from_slice(&ra).unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        for s in r["splits"].as_array().unwrap() {
            let auc = s["auc"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&auc));
        }
    }
    let prov: Value =
        serde_json::from_slice(&fs::read(a.path().join("out/provenance/eval.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 7);
    assert!(prov["outputs"]["reports/eval.json"].is_string());
    assert!(prov["inputs"].as_object().unwrap().len() >= 3);
}

#[test]
fn ablate_and_report_commands() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = example_config();
    v["ablate"]["variants"] = serde_json::json!(["full", "no_contrastive", "no_transformers"]);
    v["report"] = serde_json::json!({
        "inputs": ["out/reports/ablation.json"],
        "external": [{ "model": "published", "aucs": [84.47, 100.00, 99.98, 100.00, 88.11, 99.23] }]
    });
    let config = write_config(dir.path(), &v);
    let out = dir.path().join("out");
    for cmd in ["synth", "splits", "ablate", "report"] {
        run_ok(cmd, &config, &out);
    }
    let summary: Vec<Value> =
        serde_json::from_slice(&fs::read(out.join("reports/summary.json")).unwrap()).unwrap();
    let names: Vec<&str> = summary.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "full",
            "no_contrastive",
            "no_transformers",
            "detector_probe",
            "emoboost_add",
            "emoboost_concat",
            "emoboost_product",
            "published"
        ]
    );
    let published = summary.last().unwrap();
    assert!((published["average_auc"].as_f64().unwrap() - 95.30).abs() < 0.005);
    let table = fs::read_to_string(out.join("reports/summary.txt")).unwrap();
    assert!(table.lines().next().unwrap().contains("Average"));
}

#[test]
fn missing_checkpoint_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &example_config());
    let out = dir.path().join("out");
    for cmd in ["synth", "splits"] {
        run_ok(cmd, &config, &out);
    }
    let o = run("eval", &config, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("checkpoint not found"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn config_problems_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let config = write_config(dir.path(), &example_config());
    let o = run("synth", &config, &["--out", out, "--seed", "8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conflicts"));

    let mut v = example_config();
    v["trainn"] = serde_json::json!({});
    let config = write_config(dir.path(), &v);
    assert_eq!(run("synth", &config, &["--out", out]).status.code(), Some(2));

    let o = run("synth", &dir.path().join("absent.json"), &["--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let config = write_config(dir.path(), &example_config());
    assert_eq!(run("synth", &config, &[]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &example_config());
    let out = dir.path().join("out");
    for cmd in ["synth", "splits"] {
        run_ok(cmd, &config, &out);
    }
    fs::write(out.join("splits/in_domain.json"), b"{ not json").unwrap();
    let o = run("train-emoforensics", &config, &["--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[runtime]"));
}
