//! End-to-end runs of the `elder` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

fn elder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elder"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, steps: usize) -> String {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"seed = 4
out_dir = "{out}"
checkpoint_interval = 3

[model]
d_model = 16
n_heads = 2
n_layers = 3
d_ffn = 32
max_seq_len = 16

[model.moe]
start_layer = 2
num_layers = 2
num_loras = 8
rank = 2

[schedule]
steps_per_edit = {steps}
learning_rate = 1e-3

[data]
num_edits = 6
num_task_subjects = 4

[pretrain]
epochs = 2
"#,
        out = dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn gradcheck_passes() {
    let out = elder(&["gradcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative error"));
    assert!(text.contains("objective/guided"));
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!elder(&["frobnicate"]).status.success());
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nnot_a_key = 2\n").unwrap();
    let out = elder(&["--config", path.to_str().unwrap(), "synth"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn untrained_stream_then_codes_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let run = dir.path().join("run");

    let out = elder(&["--config", &cfg, "edit"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["vocab.tsv", "base.ckpt", "edited.ckpt", "codes.bin", "metrics.csv", "events.jsonl", "config.toml"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("checkpoint,edits_seen,reliability,generalization,retention,param_count,seconds_per_edit")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "3");
    assert_eq!(rows[1][1], "6");
    // The editor size never changes and timing is only written on request.
    assert_eq!(rows[0][5], rows[1][5]);
    assert_eq!(rows[1][6], "");

    let out = elder(&["--config", &cfg, "codes", "--inputs", dir.path().join("inputs.csv").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let codes = std::fs::read_to_string(run.join("codes.csv")).unwrap();
    assert_eq!(codes.lines().count(), 6 + 1);
    assert_eq!(codes.lines().next().unwrap().split(',').count(), 1 + 2 * 8);
    assert!(std::fs::read_to_string(dir.path().join("inputs.csv")).unwrap().lines().count() > 7);

    let out = elder(&["--config", &cfg, "eval"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["base_intact"], true);
    // Re-evaluation agrees with the final checkpoint written by the stream.
    let last = &rows[1];
    let rel: f64 = last[2].parse().unwrap();
    assert!((report["row"]["reliability"].as_f64().unwrap() - rel).abs() < 1e-12);
}

#[test]
fn synth_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0);
    let target = dir.path().join("data");
    let out = elder(&["--config", &cfg, "synth", "--dir", target.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["edits.jsonl", "tasks.jsonl", "corpus.jsonl"] {
        assert!(target.join(f).is_file(), "{f} missing");
    }
    let edits = std::fs::read_to_string(target.join("edits.jsonl")).unwrap();
    assert_eq!(edits.lines().count(), 6);
}
