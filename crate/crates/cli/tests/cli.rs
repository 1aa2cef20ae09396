use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mitp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitp"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(variant: &str) -> Value {
    json!({
        "encoder": {
            "num_layers": 4, "d_v": 8, "d_t": 8, "num_heads": 2, "n_patches": 3,
            "raw_dim": 4, "n_text_tokens": 4, "vocab_size": 16, "d_joint": 6
        },
        "interaction_layers": if variant == "baseline" { json!([]) } else { json!([1, 2]) },
        "prompt_length": 2,
        "ablation_variant": variant,
        "epochs": 2,
        "batch_size": 8,
        "lr": 0.003,
        "data": {"synthetic": {
            "num_classes": 3, "n_train": 24, "n_val": 12, "n_test": 12,
            "n_patches": 3, "raw_dim": 4, "n_text_tokens": 4, "vocab_size": 16
        }}
    })
}

fn write(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn baseline_train_has_no_trainable_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &tiny_config("baseline"));
    let out = dir.path().join("results");
    let o = mitp(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = read_json(&out.join("run_result.json"));
    assert_eq!(r["trainable_param_count"], 0);
    assert_eq!(r["epochs_run"], 0);
    assert!(!out.join("checkpoint.mitpw").exists());
}

#[test]
fn train_is_idempotent_and_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &tiny_config("mitp_full"));
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = mitp(&["train", "--config", &cfg, "--out", out_s, "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mitp_full seed 0"));
    let first = read_json(&out.join("run_result.json"));
    let first_csv = fs::read_to_string(out.join("run_result.csv")).unwrap();
    let ckpt = fs::read(out.join("checkpoint.mitpw")).unwrap();

    let o = mitp(&["train", "--config", &cfg, "--out", out_s, "--format", "csv"]);
    assert!(o.status.success());
    let second = read_json(&out.join("run_result.json"));
    for key in ["test_metrics", "test_loss", "curves", "initial_train_loss", "final_train_loss", "census"] {
        assert_eq!(first[key], second[key], "{key}");
    }
    assert_eq!(fs::read(out.join("checkpoint.mitpw")).unwrap(), ckpt);
    // Only the wall time may differ between the CSV rows.
    let strip = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&first_csv), strip(&fs::read_to_string(out.join("run_result.csv")).unwrap()));

    let ev = dir.path().join("eval");
    let ckpt_path = out.join("checkpoint.mitpw");
    let o = mitp(&["eval", "--config", &cfg, "--out", ev.to_str().unwrap(), "--checkpoint", ckpt_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let e = read_json(&ev.join("eval_result.json"));
    assert_eq!(e["test_metrics"], first["test_metrics"]);
    assert_eq!(e["test_loss"], first["test_loss"]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &tiny_config("prompts_only"));
    let out = dir.path().join("o");
    let o = mitp(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&out.join("run_result.json"))["seed"], 7);
}

#[test]
fn gen_data_writes_three_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &tiny_config("mitp_full"));
    let out = dir.path().join("data");
    let o = mitp(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for (split, n) in [("train", 24), ("val", 12), ("test", 12)] {
        let text = fs::read_to_string(out.join(format!("{split}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n);
    }

    // The written files train through a JSONL config.
    let mut jsonl = tiny_config("prompts_only");
    jsonl["data"] = json!({"jsonl": {
        "train": "data/train.jsonl", "val": "data/val.jsonl", "test": "data/test.jsonl",
        "num_classes": 3, "task": "single_label"
    }});
    let cfg = write(dir.path(), "jsonl.json", &jsonl);
    let o = mitp(&["train", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = mitp(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = mitp(&[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, "{\n  \"epochs\": 3,\n  \"lr\": ,\n}").unwrap();
    let o = mitp(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("column"), "{err}");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn invalid_config_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config("mitp_full");
    c["similarity"] = json!("euclid");
    let cfg = write(dir.path(), "run.json", &c);
    let o = mitp(&["census", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_data_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config("prompts_only");
    c["data"] = json!({"jsonl": {
        "train": "nope/train.jsonl", "val": "nope/val.jsonl", "test": "nope/test.jsonl",
        "num_classes": 3, "task": "single_label"
    }});
    let cfg = write(dir.path(), "run.json", &c);
    let o = mitp(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("error"));
}

#[test]
fn gradcheck_passes_and_prints_each_suite() {
    let dir = tempfile::tempdir().unwrap();
    let o = mitp(&["gradcheck", "--tolerance", "1e-4", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for suite in ["primitives", "memory_hub", "end_to_end"] {
        assert!(text.lines().any(|l| l.starts_with(suite) && l.ends_with("ok")), "{text}");
    }
    assert!(dir.path().join("gradcheck.json").exists());

    // An impossible tolerance fails with a runtime error.
    let o = mitp(&["gradcheck", "--tolerance", "1e-300"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn census_prints_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.json", &tiny_config("mitp_full"));
    let o = mitp(&["census", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for g in ["backbone", "prompt_bank", "memory_hub", "total", "trainable fraction"] {
        assert!(text.contains(g), "{text}");
    }
}

#[test]
fn ablate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = json!({
        "base": tiny_config("mitp_full"),
        "axes": {"variant": ["mitp_full", "naive_mlp_interaction", "prompts_only", "baseline"]}
    });
    let sweep = write(dir.path(), "sweep.json", &sweep);
    let out = dir.path().join("ablate");
    let o = mitp(&["ablate", "--sweep", &sweep, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 5, "{table}");
    for v in ["mitp_full", "naive_mlp_interaction", "prompts_only", "baseline"] {
        assert!(table.contains(v));
    }
    for f in ["results.csv", "results.json", "aggregates.csv", "layer_sweep.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let runs = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);

    let rep = dir.path().join("report");
    let o = mitp(&["report", "--input", out.join("results.json").to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(rep.join("aggregates.csv")).unwrap(), fs::read_to_string(out.join("aggregates.csv")).unwrap());
    let strip = |s: String| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(fs::read_to_string(rep.join("runs.csv")).unwrap()), strip(runs));
}

#[test]
fn threaded_ablation_matches_serial() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = json!({
        "base": tiny_config("prompts_only"),
        "axes": {"seed": [1, 2, 3]}
    });
    let sweep = write(dir.path(), "sweep.json", &sweep);
    let run = |out: &Path, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mitp"))
            .args(["ablate", "--sweep", &sweep, "--out", out.to_str().unwrap()])
            .env("MITP_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("aggregates.csv")).unwrap()
    };
    assert_eq!(run(&dir.path().join("a"), "1"), run(&dir.path().join("b"), "2"));

    let o = Command::new(env!("CARGO_BIN_EXE_mitp"))
        .args(["ablate", "--sweep", &sweep, "--out", dir.path().join("c").to_str().unwrap()])
        .env("MITP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
