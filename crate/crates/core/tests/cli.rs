use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mdrive"));
    c.env("MD_THREADS", "2").env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, channels: usize, steps: usize) -> PathBuf {
    let cfg = json!({
        "encoder": { "input_size": 8, "stages": [[4, 1], [channels, 1]], "large_kernel": 3 },
        "moe": { "num_experts": 2, "expert_out_channels": 4, "gate_hidden": 2, "proj_dim": 16 },
        "adapter": { "heads": 2 },
        "lm": { "dim": 16, "enc_layers": 1, "dec_layers": 1, "heads": 2, "ffn_dim": 24, "max_text_len": 16, "max_answer_len": 24 },
        "train": { "steps": steps, "batch": 2, "lr": 0.001 }
    });
    let p = dir.join(format!("tiny_{channels}_{steps}.json"));
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn generate(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["generate", "--train", "6", "--test", "4", "--size", "8", "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn pipeline_artifacts_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (d1, d2) = (generate(t, "d1", "3"), generate(t, "d2", "3"));
    assert_eq!(tree(&d1), tree(&d2));
    assert_ne!(tree(&d1), tree(&generate(t, "d3", "4")));

    let cfg = tiny_config(t, 8, 4);
    let (r1, r2) = (t.join("r1"), t.join("r2"));
    ok(&["train", "--config", s(&cfg), "--data", s(&d1), "--out", s(&r1)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&d2), "--out", s(&r2), "--parallel"]);
    assert_eq!(tree(&r1), tree(&r2));
    for f in ["loss.csv", "metrics.json", "predictions.jsonl", "checkpoint/manifest.json"] {
        assert!(r1.join(f).exists(), "{f}");
    }
    let loss = fs::read_to_string(r1.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 5);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(r1.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["train"]["steps"], 4);

    // Decoding a checkpoint and rescoring its predictions agree.
    let (e1, e2) = (t.join("e1"), t.join("e2"));
    ok(&["eval", "--checkpoint", s(&r1.join("checkpoint")), "--data", s(&d1), "--out", s(&e1)]);
    assert_eq!(fs::read(e1.join("predictions.jsonl")).unwrap(), fs::read(r1.join("predictions.jsonl")).unwrap());
    ok(&["eval", "--predictions", s(&e1.join("predictions.jsonl")), "--out", s(&e2)]);
    let a: Value = serde_json::from_str(&fs::read_to_string(e1.join("report.json")).unwrap()).unwrap();
    let b: Value = serde_json::from_str(&fs::read_to_string(e2.join("report.json")).unwrap()).unwrap();
    assert_eq!(a["report"], b["report"]);
    assert_eq!(a["report"], metrics["report"]);

    let sample = fs::read_to_string(d1.join("test/manifest.jsonl")).unwrap();
    let id = serde_json::from_str::<Value>(sample.lines().next().unwrap()).unwrap()["id"]
        .as_str()
        .unwrap()
        .to_string();
    let sal = t.join("sal");
    ok(&["saliency", "--checkpoint", s(&r1.join("checkpoint")), "--data", s(&d1), "--sample", &id, "--out", s(&sal)]);
    assert!(sal.join("CAM_FRONT.pgm").exists());
    assert!(sal.join("saliency.json").exists());
}

#[test]
fn ablation_runs_every_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let data = generate(t, "d", "1");
    let cfg = tiny_config(t, 64, 1);
    for (axis, values) in [("experts", ["2", "4", "6"]), ("tokens", ["8", "16", "32"])] {
        let out = t.join(axis);
        ok(&["ablate", "--axis", axis, "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
        let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
        let rows: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
        let rows = rows.as_array().or_else(|| rows["rows"].as_array()).unwrap().clone();
        assert_eq!(rows.len(), 3, "{table}");
        for v in values {
            assert!(table.contains(v), "{table}");
        }
    }
}

#[test]
fn gradcheck_and_report_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = ok(&["gradcheck", "--trials", "5", "--out", s(&out)]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("conv_transpose2d"), "{text}");
    let checks: Value = serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(checks.as_array().unwrap().len() >= 23);
    let o = ok(&["report"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("844940"), "{text}");
}

#[test]
fn exit_codes_follow_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    assert_eq!(run(&["gradcheck", "--trials", "0"]).status.code(), Some(2));
    let bad = t.join("bad.json");
    fs::write(&bad, r#"{"train": {"momentum": 0.9}}"#).unwrap();
    assert_eq!(run(&["report", "--config", s(&bad)]).status.code(), Some(2));
    let missing = t.join("nope");
    assert_eq!(
        run(&["train", "--data", s(&missing), "--out", s(&t.join("o"))]).status.code(),
        Some(4)
    );
    assert_eq!(run(&["eval", "--predictions", s(&missing)]).status.code(), Some(4));
    assert!(!t.join("o").exists());

    // An existing non-empty output is only replaced with --force.
    let d = generate(t, "d", "2");
    let o = run(&["generate", "--train", "1", "--test", "1", "--size", "8", "--out", s(&d)]);
    assert_eq!(o.status.code(), Some(2));
    ok(&["generate", "--train", "1", "--test", "1", "--size", "8", "--out", s(&d), "--force"]);
    let leftovers: Vec<_> = fs::read_dir(t)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".tmp-"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}
