use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oa_vlm::model::{param_shapes, ModelConfig};

fn oavl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oavl")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn synth(dir: &Path, n: usize, seed: u64) -> Output {
    oavl(&["--threads", "1", "synth", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out-dir", path(dir)])
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--threads", "1", "train", "--manifest", path(manifest), "--out", path(out), "--epochs", "1"];
    args.extend_from_slice(extra);
    oavl(&args)
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let out = synth(&d, 100, 7);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let manifest = fs::read_to_string(d.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 100);
    let pgms = fs::read_dir(d.join("images")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "pgm");
    assert_eq!(pgms.count(), 100);
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 30, 3);
    synth(&b, 30, 3);
    assert_eq!(fs::read(a.join("manifest.jsonl")).unwrap(), fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("images/oa-00029.pgm")).unwrap(), fs::read(b.join("images/oa-00029.pgm")).unwrap());
}

#[test]
fn train_on_missing_manifest_exits_2_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.bin");
    let out = train(&dir.path().join("missing.jsonl"), &ckpt, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert!(!ckpt.exists());
}

#[test]
fn invalid_inputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(oavl(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(oavl(&[]).status.code(), Some(1));
    assert_eq!(synth(&dir.path().join("d"), 3, 0).status.code(), Some(1));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "unknown": true}}"#).unwrap();
    let out = oavl(&["--config", path(&cfg), "synth", "--n", "20", "--out-dir", path(&dir.path().join("e"))]);
    assert_eq!(out.status.code(), Some(1));
    let d = dir.path().join("ok");
    synth(&d, 40, 1);
    let out = train(&d, &dir.path().join("x.bin"), &["--batch-size", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let out_dir = dir.path().join("from-config");
    fs::write(&cfg, format!(r#"{{"n": 12, "paths": {{"out_dir": {:?}}}, "synth": {{"seed": 4}}}}"#, path(&out_dir))).unwrap();
    assert_eq!(oavl(&["--config", path(&cfg), "synth"]).status.code(), Some(0));
    assert_eq!(fs::read_to_string(out_dir.join("manifest.jsonl")).unwrap().lines().count(), 12);
    let flagged = dir.path().join("flagged");
    assert_eq!(oavl(&["--config", path(&cfg), "synth", "--n", "15", "--out-dir", path(&flagged)]).status.code(), Some(0));
    assert_eq!(fs::read_to_string(flagged.join("manifest.jsonl")).unwrap().lines().count(), 15);
}

#[test]
fn captions_emit_three_kinds_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    synth(&d, 20, 2);
    let out_path = dir.path().join("caps.jsonl");
    let out = oavl(&["captions", "--input", path(&d.join("manifest.jsonl")), "--out", path(&out_path)]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<serde_json::Value> =
        fs::read_to_string(&out_path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 60);
    let kinds: Vec<&str> = lines[..3].iter().map(|v| v["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["abnormality", "location", "overall"]);
    assert!(lines.iter().all(|v| v["id"].is_string() && !v["text"].as_str().unwrap().is_empty()));

    let record = dir.path().join("record.json");
    let first = fs::read_to_string(d.join("manifest.jsonl")).unwrap().lines().next().unwrap().to_string();
    let mut v: serde_json::Value = serde_json::from_str(&first).unwrap();
    v.as_object_mut().unwrap().retain(|k, _| k != "image_path" && k != "split");
    fs::write(&record, v.to_string()).unwrap();
    let single = dir.path().join("one.jsonl");
    assert_eq!(oavl(&["captions", "--input", path(&record), "--out", path(&single)]).status.code(), Some(0));
    assert_eq!(fs::read_to_string(&single).unwrap().lines().count(), 3);
}

#[test]
fn train_inspect_eval_and_saliency() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    synth(&d, 200, 9);
    let ckpt = dir.path().join("model.bin");
    let report = dir.path().join("train.json");
    let out = train(&d, &ckpt, &["--batch-size", "16", "--report", path(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["epochs"].as_array().unwrap().len(), 1);

    let out = oavl(&["inspect", path(&ckpt)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let listed: Vec<(String, String)> = text
        .lines()
        .map(|l| {
            let mut f = l.split('\t');
            (f.next().unwrap().to_string(), f.next().unwrap().to_string())
        })
        .collect();
    for (name, shape) in param_shapes(&ModelConfig::default()) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        assert!(listed.contains(&(name.to_string(), format!("[{}]", dims.join(", ")))), "{name} missing");
    }

    let ev = dir.path().join("eval");
    let out = oavl(&["eval", "zero-shot", "--checkpoint", path(&ckpt), "--manifest", path(&d), "--out", path(&ev)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["zero_shot"]["total"], 20);
    assert!(ev.join("confusion.csv").exists());

    let rv = dir.path().join("retrieval");
    let args = ["eval", "retrieval", "--checkpoint", path(&ckpt), "--manifest", path(&d), "--out", path(&rv), "--k", "3"];
    assert_eq!(oavl(&args).status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(rv.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["retrieval"]["k"], 3);
    assert_eq!(v["retrieval"]["hits_at"].as_array().unwrap().len(), 3);

    let sv = dir.path().join("saliency");
    let prompt = "In femur medial compartment: mild osteophytes.";
    let args = ["saliency", "--checkpoint", path(&ckpt), "--manifest", path(&d), "--id", "oa-00003", "--prompt", prompt, "--out", path(&sv)];
    assert_eq!(oavl(&args).status.code(), Some(0));
    assert!(sv.join("saliency/000-oa-00003.pgm").exists());
    let args = ["saliency", "--checkpoint", path(&ckpt), "--manifest", path(&d), "--id", "nope", "--prompt", prompt, "--out", path(&sv)];
    assert_eq!(oavl(&args).status.code(), Some(1));
}

#[test]
fn identical_runs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    synth(&d, 120, 6);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    train(&d, &a, &["--batch-size", "16", "--seed", "2"]);
    train(&d, &b, &["--batch-size", "16", "--seed", "2"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        oavl(&["--threads", "1", "eval", "retrieval", "--checkpoint", path(&a), "--manifest", path(&d), "--out", path(&out)]);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}
