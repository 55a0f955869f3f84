use std::path::Path;
use std::process::{Command, Output};

use fusionkit::{save_map, DType, PredictionMatrix, Tensor, TensorMap};

fn fusionkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionkit"))
        .args(args)
        .env("FUSIONKIT_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let out = fusionkit(&["synth", "--seed", "7", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
}

fn toy(w: &[f64]) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::from_f64(DType::F32, vec![w.len()], w).unwrap());
    m
}

#[test]
fn synth_merge_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = dir.path().join("pipeline.yaml");
    let out = fusionkit(&["merge", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["algorithm"], "task_arithmetic");
    assert!(report["tasks"]["task_a"].as_f64().unwrap() > 0.5);

    let merged = dir.path().join("merged.safetensors");
    let out = fusionkit(&["evaluate", "--model", merged.to_str().unwrap(), "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let again: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(again["tasks"], report["tasks"]);
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = dir.path().join("pipeline.yaml");
    let out = fusionkit(&[
        "merge",
        "--config",
        config.to_str().unwrap(),
        "method.scaling=0",
        "merged_model_save_path=zero.safetensors",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let merged = fusionkit::load_map(dir.path().join("zero.safetensors")).unwrap();
    let base = fusionkit::load_map(dir.path().join("base.safetensors")).unwrap();
    assert_eq!(merged, base);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = dir.path().join("pipeline.yaml");
    let out = fusionkit(&["merge", "--config", config.to_str().unwrap(), "foo=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown field `foo`"), "{}", stderr(&out));
    let out = fusionkit(&["merge", "--config", config.to_str().unwrap(), "method.algorithm=nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_5() {
    let out = fusionkit(&["validate", "--config", "/definitely/not/here.yaml"]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn mismatched_pool_exits_3_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    save_map(&toy(&[1.0, 2.0]), dir.path().join("a.safetensors")).unwrap();
    let mut b = toy(&[3.0, 4.0]);
    b.insert("extra.bias", Tensor::from_f64(DType::F32, vec![1], &[0.0]).unwrap());
    save_map(&b, dir.path().join("b.safetensors")).unwrap();
    let cfg = "method:\n  algorithm: simple_average\nmodelpool:\n  models:\n    - {name: a, path: a.safetensors}\n    - {name: b, path: b.safetensors}\nmerged_model_save_path: out.safetensors\nreport_save_path: report.json\n";
    std::fs::write(dir.path().join("c.yaml"), cfg).unwrap();
    let config = dir.path().join("c.yaml");

    let out = fusionkit(&["validate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("extra.bias"), "{}", stderr(&out));

    let out = fusionkit(&["merge", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("extra.bias"));
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["a.safetensors", "b.safetensors", "c.yaml"]);
}

#[test]
fn ensemble_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let a = PredictionMatrix::from_rows("a", &[&[2.0, 0.0], &[0.0, 1.0]]).unwrap();
    let b = PredictionMatrix::from_rows("b", &[&[0.0, 2.0], &[0.0, 3.0]]).unwrap();
    a.save(dir.path().join("a.safetensors")).unwrap();
    b.save(dir.path().join("b.safetensors")).unwrap();
    let pa = dir.path().join("a.safetensors");
    let pb = dir.path().join("b.safetensors");
    let out_path = dir.path().join("out.safetensors");
    let out = fusionkit(&[
        "ensemble",
        "--preds",
        pa.to_str().unwrap(),
        pb.to_str().unwrap(),
        "--method",
        "weighted_ensemble",
        "--weights",
        "1,0",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let got = PredictionMatrix::load(&out_path).unwrap();
    let want = a.softmax();
    assert!(got.scores().iter().zip(want.scores()).all(|(x, y)| (x - y).abs() < 1e-6));

    let out = fusionkit(&[
        "ensemble",
        "--preds",
        pa.to_str().unwrap(),
        "--method",
        "vote",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_cosine_prints_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let config = dir.path().join("pipeline.yaml");
    let json = dir.path().join("cos.json");
    let out = fusionkit(&[
        "inspect",
        "taskvec-cosine",
        "--config",
        config.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("task_a"));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let v = &m["values"];
    assert_eq!(v[0][1], v[1][0]);
    assert!((v[0][0].as_f64().unwrap() - 1.0).abs() < 1e-6);
    // the two synthetic experts touch disjoint coordinates
    assert!(v[0][1].as_f64().unwrap().abs() < 1e-6);
}

#[test]
fn single_model_cosine_is_one() {
    let dir = tempfile::tempdir().unwrap();
    save_map(&toy(&[0.0, 0.0]), dir.path().join("base.safetensors")).unwrap();
    save_map(&toy(&[1.0, -2.0]), dir.path().join("a.safetensors")).unwrap();
    let cfg = "method:\n  algorithm: task_arithmetic\nmodelpool:\n  base: base.safetensors\n  models:\n    - {name: a, path: a.safetensors}\n";
    std::fs::write(dir.path().join("c.yaml"), cfg).unwrap();
    let out = fusionkit(&["inspect", "taskvec-cosine", "--config", dir.path().join("c.yaml").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("1.00"));
}

#[test]
fn log_level_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_fusionkit"))
        .args(["merge", "--config", dir.path().join("pipeline.yaml").to_str().unwrap()])
        .env("FUSIONKIT_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stderr(&out).contains("task_arithmetic merged 2 models"), "{}", stderr(&out));
}
