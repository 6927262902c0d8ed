use std::path::Path;
use std::process::{Command, Output};

fn isr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic corpus plus a two-epoch checkpoint in a fresh directory.
fn trained() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(isr(&["synth", "--out", "data", "--dialogs", "8", "--seed", "5"], dir.path()));
    let log = ok(isr(&["train", "--corpus", "data", "--epochs", "2", "--out", "ck/m.isrc"], dir.path()));
    assert_eq!(log.lines().count(), 2);
    dir
}

#[test]
fn train_generate_evaluate_round_trip() {
    let dir = trained();
    let p = dir.path();
    ok(isr(&["generate", "--ckpt", "ck/m.isrc", "--corpus", "data", "--decode", "greedy", "--out", "hyp.tsv"], p));
    let hyp = std::fs::read_to_string(p.join("hyp.tsv")).unwrap();
    assert_eq!(hyp.lines().count(), 8);
    assert!(hyp.lines().all(|l| l.split('\t').count() == 3));

    let report = ok(isr(&["evaluate", "--hyp", "hyp.tsv", "--ref", "data/corpus.jsonl"], p));
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["bleu"].as_array().unwrap().len(), 4);
    assert_eq!(v["samples"].as_array().unwrap().len(), 8);

    // a hypothesis file scored against itself is perfect
    let self_report = ok(isr(&["evaluate", "--hyp", "hyp.tsv", "--ref", "hyp.tsv"], p));
    let v: serde_json::Value = serde_json::from_str(&self_report).unwrap();
    let nonempty = hyp.lines().any(|l| !l.split('\t').nth(2).unwrap().is_empty());
    if nonempty {
        assert_eq!(v["rouge_l"].as_f64().unwrap(), 1.0);
    }
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = trained();
    let p = dir.path();
    ok(isr(&["train", "--corpus", "data", "--epochs", "2", "--out", "ck/again.isrc"], p));
    let a = std::fs::read(p.join("ck/m.isrc")).unwrap();
    let b = std::fs::read(p.join("ck/again.isrc")).unwrap();
    assert_eq!(&a[..4], b"ISRC");
    assert_eq!(a, b);
    assert!(p.join("ck/m.json").exists());
}

#[test]
fn inspection_commands() {
    let dir = trained();
    let p = dir.path();
    let trace = ok(isr(
        &["trace-paths", "--ckpt", "ck/m.isrc", "--corpus", "data", "--sample", "syn5_0001", "--edges", "e.txt"],
        p,
    ));
    for line in trace.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["sample"], "syn5_0001");
    }
    assert!(p.join("e.txt").exists());

    let w = ok(isr(&["dump-weights", "--ckpt", "ck/m.isrc", "--corpus", "data", "--sample", "syn5_0001"], p));
    for row in w.lines() {
        let sum: f64 = row.split(' ').map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-4);
    }
}

#[test]
fn sweep_and_ablate_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(isr(&["synth", "--out", "data", "--dialogs", "4"], p));
    let table = ok(isr(
        &["sweep", "--corpus", "data", "--epochs", "1", "--axis", "p", "--values", "0.2,0.8", "--out", "plots"],
        p,
    ));
    assert_eq!(table.lines().count(), 3);
    let bleu1 = std::fs::read_to_string(p.join("plots/bleu1.dat")).unwrap();
    assert_eq!(bleu1.lines().map(|l| l.split(' ').next().unwrap()).collect::<Vec<_>>(), ["0.2", "0.8"]);

    let table = ok(isr(&["ablate", "--corpus", "data", "--epochs", "1", "--variants", "full,no_gate"], p));
    assert!(table.contains("\nno_gate\t"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(isr(&["synth", "--out", "data", "--dialogs", "2"], p));
    std::fs::write(p.join("bad.json"), r#"{"ablation": {"no_text_encoder": true, "no_visual_encoder": true}}"#).unwrap();
    let out = isr(&["train", "--config", "bad.json", "--corpus", "data", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(2));
    let out = isr(&["train", "--corpus", "missing", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(3));
    let out = isr(&["sweep", "--corpus", "data", "--axis", "I", "--values", "5..1"], p);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(p.join("data/corpus.jsonl"), "{not json\n").unwrap();
    let out = isr(&["train", "--corpus", "data", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(3));
    // value lists are checked before any data is read
    let out = isr(&["sweep", "--corpus", "data", "--axis", "p", "--values", "0.2,x"], p);
    assert_eq!(out.status.code(), Some(2));
}
