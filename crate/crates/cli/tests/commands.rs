//! The `eegtok` binary: exit codes, config precedence, preprocessing and
//! profiling outputs.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn eegtok_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_eegtok"));
    cmd.args(args).env_remove("EEGTOK_LLM_ENDPOINT").env_remove("EEGTOK_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn eegtok(args: &[&str]) -> Output {
    eegtok_env(args, &[])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let o = eegtok(args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--classes", "2", "--per-class", "2", "--test-per-class", "1"];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&eegtok(&[])), 2);
    assert_eq!(code(&eegtok(&["frobnicate"])), 2);
    assert_eq!(code(&eegtok(&["train", "vq"])), 2, "missing --data");
    assert_eq!(code(&eegtok(&["synth", "--classes", "2"])), 2, "missing --out");
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&eegtok(&["synth", "--out", p(tmp.path()), "--classes", "9"])), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"no_such_section": 1}"#).unwrap();
    assert_eq!(code(&eegtok(&["--config", p(&bad), "synth", "--out", p(tmp.path())])), 2);
}

#[test]
fn data_and_dependency_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(code(&eegtok(&["preprocess", p(&missing), "--out", p(tmp.path())])), 3);
    let ds = tmp.path().join("ds");
    synth(&ds, &[]);
    let o = eegtok(&["train", "cpt", "--data", p(&ds), "--init", p(&missing), "--out", p(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 3);
    let o = eegtok(&["eval", "--checkpoint", p(&missing), "--data", p(&ds), "--out", p(tmp.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 11}"#).unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    synth(&a, &["--config", p(&cfg)]);
    synth(&b, &["--seed", "11"]);
    synth(&c, &["--config", p(&cfg), "--seed", "12"]);
    let sig = |d: &Path| std::fs::read(d.join("rec_0000/signal.bin")).unwrap();
    assert_eq!(sig(&a), sig(&b), "file seed equals flag seed");
    assert_ne!(sig(&a), sig(&c), "flag overrides file");

    // environment sits between the file and the flags
    let (d, e) = (tmp.path().join("d"), tmp.path().join("e"));
    let base = ["synth", "--classes", "2", "--per-class", "2", "--test-per-class", "1", "--config", p(&cfg)];
    let mut args = base.to_vec();
    args.extend(["--out", p(&d)]);
    assert_eq!(code(&eegtok_env(&args, &[("EEGTOK_SEED", "12")])), 0);
    assert_eq!(sig(&d), sig(&c), "environment overrides file");
    let mut args = base.to_vec();
    args.extend(["--out", p(&e), "--seed", "11"]);
    assert_eq!(code(&eegtok_env(&args, &[("EEGTOK_SEED", "12")])), 0);
    assert_eq!(sig(&e), sig(&a), "flag overrides environment");
}

#[test]
fn preprocess_records_provenance_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, &[]);
    let input = ds.join("rec_0000");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["preprocess", p(&input), "--out", p(&a), "--notch", "60"]);
    ok(&["preprocess", p(&input), "--out", p(&b), "--notch", "60"]);
    for f in ["manifest.json", "signal.bin"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let steps = json(&a.join("manifest.json"))["provenance"]["steps"].clone();
    let ops: Vec<&str> = steps.as_array().unwrap().iter().map(|s| s["op"].as_str().unwrap()).collect();
    assert_eq!(ops, ["resample", "bandpass_notch", "robust_scale"]);
    assert_eq!(steps[1]["notch"], 60.0);
    assert_eq!(steps[1]["zero_phase"], true);
}

#[test]
fn profile_writes_three_files_and_guards_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth(&ds, &[]);
    let input = ds.join("rec_0001");
    let out = tmp.path().join("prof");
    ok(&["profile", p(&input), "--out", p(&out), "--dataset", "HMC", "--labels", "Wake,REM"]);
    let prompt = std::fs::read_to_string(out.join("prompt.txt")).unwrap();
    assert!(prompt.contains("[Verbalized Features]"));
    assert!(prompt.contains("Task Logic: Sleep Staging"));
    let profile = json(&out.join("profile.json"));
    assert_eq!(profile.as_object().unwrap().len(), 6);
    assert!(json(&out.join("features.json")).is_object());

    let leak = tmp.path().join("leak");
    let o = eegtok(&["profile", p(&input), "--out", p(&leak), "--dataset", "TUSZ", "--labels", "seizure"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seizure"));
    assert!(!leak.join("prompt.txt").exists());

    let meta = tmp.path().join("meta.json");
    std::fs::write(&meta, r#"{"sample_name": "s1", "dataset_name": "HMC", "bogus": 1}"#).unwrap();
    let o = eegtok(&["profile", p(&input), "--out", p(&leak), "--meta", p(&meta)]);
    assert_ne!(code(&o), 0, "unknown meta keys are rejected");
}
