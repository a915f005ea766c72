use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fewshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fewshot")).args(args).output().unwrap()
}

fn only_file(dir: &Path, prefix: &str, ext: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            name.starts_with(prefix) && name.ends_with(ext)
        })
        .collect();
    assert_eq!(hits.len(), 1, "{hits:?}");
    hits.pop().unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = fewshot(&["synth", "--classes", "10", "--dim", "16", "--shift", "0", "--seed", "1", "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fa = only_file(&a, "synth-", ".csv");
    let fb = only_file(&b, "synth-", ".csv");
    assert_eq!(fa.file_name(), fb.file_name());
    assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
}

#[test]
fn evaluate_on_a_csv_target_writes_a_600_episode_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(fewshot(&["synth", "--classes", "10", "--dim", "16", "--seed", "1", "--out", d]).status.success());
    let csv = only_file(dir.path(), "synth-", ".csv");
    let target = dir.path().join("synth.csv");
    fs::rename(csv, &target).unwrap();
    let out = fewshot(&[
        "evaluate", "--head", "proto", "--n-way", "5", "--k-shot", "1", "--n-query", "8", "--episodes", "600", "--seed", "7",
        "--target", target.to_str().unwrap(), "--out", d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(only_file(dir.path(), "evaluate-", ".json")).unwrap()).unwrap();
    assert_eq!(report["n_episodes"], 600);
    assert_eq!(report["per_episode_accuracy"].as_array().unwrap().len(), 600);
    let fp = report["config"]["fingerprint"].as_str().unwrap();
    let confusion = only_file(dir.path(), "evaluate-", ".csv");
    assert!(confusion.to_string_lossy().contains(fp));
}

#[test]
fn usage_errors_exit_with_2() {
    let out = fewshot(&["evaluate", "--head", "proto", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--target"));
    assert_eq!(fewshot(&["evaluate", "--head", "maml", "--seed", "1", "--target", "synth"]).status.code(), Some(2));
    assert_eq!(fewshot(&["evaluate", "--backbone", "resnet50", "--seed", "1", "--target", "synth"]).status.code(), Some(2));
    assert_eq!(fewshot(&["evaluate", "--target", "synth"]).status.code(), Some(2));
    assert_eq!(fewshot(&["evaluate", "--bogus"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let out = fewshot(&["evaluate", "--seed", "1", "--target", "/no/such/file.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let out = fewshot(&["evaluate", "--seed", "1", "--k-shot", "40", "--target", "synth:classes=6,samples=20"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = fewshot(&[
        "pretrain", "--source", "synth:classes=4,samples=10", "--optimizer", "sgd", "--lr", "1e300", "--epochs", "3",
        "--seed", "1", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn flags_override_the_config_file_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"head": "matching", "n-way": 3, "episodes": 4, "seed": 2, "target": "synth:classes=6,samples=14"}"#).unwrap();
    let out = fewshot(&["evaluate", "--config", cfg.to_str().unwrap(), "--head", "proto", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning: --head"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(only_file(dir.path(), "evaluate-", ".json")).unwrap()).unwrap();
    assert_eq!(report["config"]["head"]["kind"], "proto");
    assert_eq!(report["config"]["n_way"], 3);
    assert_eq!(report["n_episodes"], 4);
}

#[test]
fn pretrain_then_evaluate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let source = "synth:classes=12,samples=12,dim=6";
    let out = fewshot(&[
        "pretrain", "--head", "baseline_pp", "--backbone", "mlp:16,8", "--source", source, "--source-classes", "0-6",
        "--epochs", "2", "--seed", "3", "--out", d, "--checkpoint-interval", "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = only_file(dir.path(), "pretrain-", ".json");
    let log = fs::read_to_string(only_file(dir.path(), "pretrain-", ".csv")).unwrap();
    assert!(log.starts_with("step,loss,accuracy,seconds"));
    let fp = ckpt.file_stem().unwrap().to_string_lossy().trim_start_matches("pretrain-").to_string();
    assert!(only_file(dir.path(), "checkpoint-pretrain-", "000002.json").exists());
    assert!(fs::read_dir(dir.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(&fp)));

    for k in ["1", "5"] {
        let out = fewshot(&[
            "evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--target", source, "--target-classes", "7-11",
            "--k-shot", k, "--n-query", "4", "--episodes", "5", "--fine-tune-iters", "10", "--seed", "4", "--out", d,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let reports: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .filter(|p| p.contains("evaluate-") && p.ends_with(".json"))
        .collect();
    assert_eq!(reports.len(), 2);
    let mut args = vec!["report"];
    args.extend(reports.iter().map(String::as_str));
    args.extend(["--out", d]);
    let out = fewshot(&args);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Baseline++") && text.contains("1-shot") && text.contains("5-shot"), "{text}");
}

#[test]
fn metatrain_relation_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let source = "synth:classes=10,samples=10,dim=4";
    let out = fewshot(&[
        "metatrain", "--head", "relation", "--backbone", "mlp:8", "--source", source, "--source-classes", "0-5",
        "--n-way", "3", "--k-shot", "2", "--n-query", "2", "--episodes", "10", "--seed", "3", "--out", d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = only_file(dir.path(), "metatrain-", ".json");
    let out = fewshot(&[
        "evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--target", source, "--target-classes", "6-9", "--n-way", "3",
        "--k-shot", "2", "--n-query", "2", "--episodes", "4", "--seed", "1", "--out", d,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("RelationNet"));
}
