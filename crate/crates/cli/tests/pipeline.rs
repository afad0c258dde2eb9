//! A short run of every training stage through the binary, followed by the
//! commands that consume the checkpoints.

use std::path::Path;
use std::process::{Command, Output};

use eegtok_cli::rundir::read_metrics;
use serde_json::Value;

fn eegtok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegtok"))
        .args(args)
        .env_remove("EEGTOK_LLM_ENDPOINT")
        .env_remove("EEGTOK_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let o = eegtok(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap_or(Value::Null)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_resume_tokenize_eval_export() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let ds = t.join("ds");
    ok(&["synth", "--out", p(&ds), "--classes", "2", "--per-class", "3", "--test-per-class", "2", "--seed", "3"]);
    let vq_args = |out: &Path| -> Vec<String> {
        ["train", "vq", "--data", p(&ds), "--epochs", "2", "--batch-size", "2", "--out", p(out)]
            .map(String::from)
            .to_vec()
    };
    let run = |args: &[String]| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    // uninterrupted reference, then the same run stopped after 2 steps and resumed
    let full = run(&vq_args(&t.join("vq_full")));
    assert_eq!(full["complete"], true);
    let vq = t.join("vq");
    let mut partial = vq_args(&vq);
    partial.extend(["--max-steps".into(), "2".into()]);
    let first = run(&partial);
    assert_eq!(first["complete"], false);
    assert_eq!(first["steps"], 2);
    assert!(vq.join("checkpoints/latest/manifest.json").is_file());
    assert!(!vq.join("checkpoints/final").exists());
    let mut resumed = vq_args(&vq);
    resumed.push("--resume".into());
    let done = run(&resumed);
    assert_eq!(done["complete"], true);
    assert_eq!(done["steps"], full["steps"]);
    let rows = read_metrics(&vq.join("metrics.csv")).unwrap();
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=steps.len() as u64).collect::<Vec<_>>());
    let (a, b) = (full["epoch_losses"].as_array().unwrap(), done["epoch_losses"].as_array().unwrap());
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
        assert!((x - y).abs() <= 1e-3 * x.abs().max(1.0), "resumed loss {y} vs {x}");
    }
    assert!(vq.join("artifacts/codebook_health.json").is_file());

    // tokens: header `C P N_v`, one line of C*P indices per recording
    let tok = t.join("tok");
    ok(&["tokenize", p(&ds), "--checkpoint", p(&vq), "--out", p(&tok)]);
    let dump = std::fs::read_to_string(tok.join("tokens.txt")).unwrap();
    let mut lines = dump.lines();
    let head: Vec<usize> = lines.next().unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    let (c, pch, codes) = (head[0], head[1], head[2]);
    let body: Vec<Vec<usize>> = lines.map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(body.len(), 10);
    assert!(body.iter().all(|r| r.len() == c * pch && r.iter().all(|&v| v < codes)));
    let tok2 = t.join("tok2");
    ok(&["tokenize", p(&ds), "--checkpoint", p(&vq), "--out", p(&tok2)]);
    assert_eq!(dump, std::fs::read_to_string(tok2.join("tokens.txt")).unwrap());

    // stage order is enforced
    let o = eegtok(&["train", "sft", "--data", p(&ds), "--init", p(&vq), "--out", p(&t.join("bad"))]);
    assert_eq!(o.status.code(), Some(3));

    let cpt = t.join("cpt");
    ok(&["train", "cpt", "--data", p(&ds), "--init", p(&vq), "--epochs", "1", "--out", p(&cpt)]);
    let rows = read_metrics(&cpt.join("metrics.csv")).unwrap();
    assert!(rows.iter().all(|r| r.loss_text.is_some() && r.loss_eeg.is_some() && r.loss_orth.is_some()));
    let o = eegtok(&["eval", "--checkpoint", p(&cpt), "--data", p(&ds), "--out", p(t)]);
    assert_eq!(o.status.code(), Some(3), "eval needs a fine-tuned checkpoint");

    let sft = t.join("sft");
    ok(&["train", "sft", "--data", p(&ds), "--init", p(&cpt), "--epochs", "2", "--out", p(&sft)]);

    let report = ok(&["eval", "--checkpoint", p(&sft), "--data", p(&ds), "--out", p(&sft)]);
    let keys: Vec<&String> = report["metrics"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["auc_pr", "auroc", "balanced_accuracy"]);
    assert_eq!(report["n_samples"], 4);
    let first_eval = std::fs::read(sft.join("eval.json")).unwrap();
    let saved: Value = serde_json::from_slice(&first_eval).unwrap();
    for pred in saved["predictions"].as_array().unwrap() {
        let probs: f64 = pred["probs"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((probs - 1.0).abs() < 1e-9);
    }
    ok(&["eval", "--checkpoint", p(&sft), "--data", p(&ds), "--out", p(&sft)]);
    assert_eq!(first_eval, std::fs::read(sft.join("eval.json")).unwrap());

    let attn = t.join("attn");
    let rec = ds.join("rec_0000");
    ok(&["attn-export", p(&rec), "--checkpoint", p(&sft), "--out", p(&attn)]);
    let mut rdr = csv::Reader::from_path(attn.join("attention.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["expert", "channel", "patch", "weight"]);
    let rows: Vec<(usize, usize, usize, f64)> = rdr.deserialize().map(Result::unwrap).collect();
    let experts = json(&sft.join("checkpoints/final/manifest.json"))["meta"]["config"]["stage2"]["star"]["experts"]
        .as_u64()
        .expect("expert count in checkpoint meta") as usize;
    assert_eq!(rows.len(), experts * c * pch);
    // weights are normalised over channels within each (expert, patch)
    for e in 0..experts {
        for q in 0..pch {
            let total: f64 = rows.iter().filter(|r| r.0 == e && r.2 == q).map(|r| r.3).sum();
            assert!((total - 1.0).abs() < 1e-6, "expert {e} patch {q} sums to {total}");
        }
    }
}
