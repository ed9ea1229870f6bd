use std::path::Path;
use std::process::{Command, Output};

fn her2(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_her2"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL: &str = "\
seed = 3
[cohort]
slides_per_class = [4, 4, 4, 4]
patches_per_slide = [10, 20]
[pretrain]
epochs = 2
[weak]
epochs = 2
";

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("her2.toml"), SMALL).unwrap();
    for step in ["generate", "pretrain", "train-weak", "score", "report"] {
        let out = her2(dir.path(), &["-c", "her2.toml", step]);
        assert!(out.status.success(), "{step}: {}", String::from_utf8_lossy(&out.stdout));
    }
    let verdicts = std::fs::read_to_string(dir.path().join("reports/verdicts.jsonl")).unwrap();
    assert_eq!(verdicts.lines().count(), 16);
    for line in verdicts.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let fractions: Vec<f64> = serde_json::from_value(v["fractions"].clone()).unwrap();
        assert!((fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(v["principal"].as_u64().unwrap() <= 3);
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports/metrics.json")).unwrap()).unwrap();
    let stages = metrics["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    for s in stages {
        assert!(s["macroF1"].is_number(), "{s}");
    }
}

#[test]
fn zero_epoch_pretrain_still_scores() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("her2.toml"), SMALL.replace("epochs = 2", "epochs = 0")).unwrap();
    for step in ["generate", "pretrain"] {
        assert!(her2(dir.path(), &["-c", "her2.toml", step]).status.success());
    }
    let out = her2(
        dir.path(),
        &["-c", "her2.toml", "score", "--checkpoint", "checkpoints/pretrain.json"],
    );
    assert!(out.status.success());
    assert_eq!(json(&out)["slides"], 16);
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "bogus = 1\n").unwrap();
    let out = her2(dir.path(), &["-c", "bad.toml", "generate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = json(&out);
    assert_eq!(err["stage"], "config");
    assert!(err["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn generate_requires_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = her2(dir.path(), &["generate"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["stage"], "generate");
    assert!(!dir.path().join("data/cohort.jsonl").exists());
}

#[test]
fn missing_cohort_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.toml"), "seed = 1\n[paths]\ncohort = \"nope.jsonl\"\n").unwrap();
    let out = her2(dir.path(), &["-c", "x.toml", "pretrain"]);
    assert_eq!(out.status.code(), Some(2));
    let err = json(&out);
    assert_eq!(err["stage"], "pretrain");
    assert!(err["message"].as_str().unwrap().contains("nope.jsonl"));
}

#[test]
fn long_help_documents_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = her2(dir.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "seed =",
        "[paths]",
        "mean_separation =",
        "patience =",
        "[calibration]",
        "mode =",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}
