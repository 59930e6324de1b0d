use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stableseg::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stableseg"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    let text = format!(
        r#"{{"model": {{"scales": [{{"id": 0, "height": 8, "width": 8, "channels": 6}}, {{"id": 1, "height": 4, "width": 4, "channels": 6}}], "dim": 8, "num_queries": 4}},
            "gen": {{"videos": 2, "frames": 10, "labeled_every": 1}}, "metrics": {{"windows": [2, 4]}} {extra}}}"#
    );
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["loss"]).status.code(), Some(1));
    assert_eq!(run(&["--tau", "1.5", "sample-clips", "--video-len", "10"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.t2g");
    std::fs::write(&bad, b"NOPE\x01\x00\x01\x00").unwrap();
    let out = run(&["loss", "--logits", bad.to_str().unwrap(), "--labels", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    let out = run(&["--clip-len", "20", "sample-clips", "--video-len", "10", "--count", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn loss_matches_committed_result() {
    let out = run(&[
        "loss",
        "--logits",
        fixture("mtc_logits.t2g").to_str().unwrap(),
        "--labels",
        fixture("mtc_labels.t2g").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let got: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture("mtc_expected.json")).unwrap()).unwrap();
    let close = |a: &serde_json::Value, b: &serde_json::Value| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-12;
    assert!(close(&got["loss"], &want["loss"]));
    assert_eq!(got["valid_scales"], want["valid_scales"]);
    for (g, w) in got["scales"].as_array().unwrap().iter().zip(want["scales"].as_array().unwrap()) {
        assert_eq!(g["count"], w["count"]);
        assert_eq!(g["kept"], w["kept"]);
        assert!(close(&g["trimmed_mean"], &w["trimmed_mean"]));
    }
}

#[test]
fn constant_logits_give_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.t2g");
    let y = dir.path().join("y.t2g");
    Tensor::f32(vec![4, 3, 2, 2], (0..48).map(|i| (i / 4 % 3) as f32).collect()).unwrap().save(&x).unwrap();
    Tensor::u8(vec![4, 2, 2], vec![1; 16]).unwrap().save(&y).unwrap();
    let out = run(&["loss", "--logits", x.to_str().unwrap(), "--labels", y.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["loss"].as_f64(), Some(0.0));
}

#[test]
fn grad_check_passes_on_random_volumes() {
    let out = run(&["grad-check", "--volumes", "2", "--shape", "1,4,3,4,4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(run(&["grad-check", "--eps", "1", "--volumes", "1"]).status.code(), Some(1));
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    assert!(run(&["--config", c, "gen", "--out", data.to_str().unwrap()]).status.success());
    let manifest = data.join("dataset.json");
    let pred = dir.path().join("pred");
    let out = run(&["--config", c, "infer", "--data", manifest.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pm: serde_json::Value = serde_json::from_slice(&std::fs::read(pred.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(pm["videos"][0]["labels"].as_array().unwrap().len(), 10);
    // 10 frames in clips of 4: 4 + 4 + 2
    assert_eq!(pm["videos"][0]["logits"].as_array().unwrap().len(), 3);
    let eval = |args: &[&str]| {
        let mut a = vec!["--config", c, "eval", "--pred"];
        let p = pred.join("predictions.json");
        let ps = p.to_str().unwrap().to_string();
        let ms = manifest.to_str().unwrap().to_string();
        let mut owned: Vec<String> = a.drain(..).map(String::from).collect();
        owned.extend([ps, "--gt".into(), ms]);
        owned.extend(args.iter().map(|s| s.to_string()));
        bin().args(&owned).output().unwrap()
    };
    let first = eval(&[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(first.stdout, eval(&[]).stdout);
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(report["protocol"], "dense");
    assert_eq!(report["windows"].as_array().unwrap().len(), 2);
    let approx = eval(&["--protocol", "approx"]);
    let report: serde_json::Value = serde_json::from_slice(&approx.stdout).unwrap();
    assert_eq!(report["protocol"], "approx");
    assert_eq!(report["theta"].as_f64(), Some(10.0));
}

#[test]
fn sparse_corpus_dispatches_to_approx() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#", "clip_len": 10"#);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(r#""labeled_every": 1"#, r#""labeled_every": 3"#);
    std::fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let manifest = data.join("dataset.json");
    let pred = dir.path().join("pred");
    assert!(run(&["--config", c, "gen", "--out", data.to_str().unwrap()]).status.success());
    assert!(run(&["--config", c, "infer", "--data", manifest.to_str().unwrap(), "--out", pred.to_str().unwrap()])
        .status
        .success());
    let pj = pred.join("predictions.json");
    let out = run(&["--config", c, "eval", "--pred", pj.to_str().unwrap(), "--gt", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["protocol"], "approx");
    let forced = run(&["--config", c, "--protocol", "dense", "eval", "--pred", pj.to_str().unwrap(), "--gt", manifest.to_str().unwrap()]);
    assert_eq!(forced.status.code(), Some(1));
}

#[test]
fn sample_clips_partition_and_random() {
    let out = run(&["--clip-len", "3", "sample-clips", "--video-len", "7"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v[2]["indices"], serde_json::json!([6]));
    let a = run(&["--seed", "4", "sample-clips", "--video-len", "200", "--count", "5"]);
    let b = run(&["--seed", "4", "sample-clips", "--video-len", "200", "--count", "5"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}
