use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn grdo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grdo"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GRDO_SEED")
        .output()
        .unwrap()
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

/// The task 1 comparison config shrunk to a few seconds of work.
fn tiny_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(presets().join("runs/task1_compare.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    for c in cfg["data"]["generate"]["counts"].as_array_mut().unwrap() {
        c["train"] = json!(c["train"].as_u64().unwrap().min(6));
        c["val"] = json!(c["val"].as_u64().unwrap().min(3));
    }
    cfg["data"]["generate"]["slices"] = json!(4);
    cfg["model"]["slices"] = json!(4);
    cfg["model"]["embed_dim"] = json!(8);
    cfg["max_epochs"] = json!(2);
    cfg["batch_size"] = json!(8);
    cfg["seeds"] = json!([0]);
    cfg["alphas"] = json!([0.0, 0.5]);
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = grdo(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = grdo(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn bad_config_key_exits_1_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let o = grdo(
        &["train", "--config", cfg.to_str().unwrap(), "--set", "learning_rat=0.1", "--out", out.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
    let o = grdo(&["train", "--config", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = grdo(&["generate", "--preset", "nope"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn generate_writes_the_preset_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = grdo(&["generate", "--preset", "task1_sites", "--out", "gen"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let count = |f: &str| std::fs::read_to_string(dir.path().join("gen").join(f)).unwrap().lines().count();
    assert_eq!(count("train.jsonl"), 1223);
    assert_eq!(count("val.jsonl"), 308);
    let echoed: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gen/config.resolved.json")).unwrap()).unwrap();
    let file: Value =
        serde_json::from_str(&std::fs::read_to_string(presets().join("data/task1_sites.json")).unwrap()).unwrap();
    assert_eq!(echoed, file);
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let o = grdo(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.json", "metrics.csv", "weights.jsonl", "history.jsonl", "best.ckpt"] {
        let a = std::fs::read(dir.path().join("a/seed_4").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b/seed_4").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_grdo"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", "env"])
        .current_dir(dir.path())
        .env("GRDO_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("env/seed_9").is_dir());
    let o = Command::new(env!("CARGO_BIN_EXE_grdo"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", "flag", "--seed", "2"])
        .current_dir(dir.path())
        .env("GRDO_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("flag/seed_2").is_dir());
    assert!(!dir.path().join("flag/seed_9").exists());
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = grdo(&["train", "--config", cfg.to_str().unwrap(), "--set", "dro.alpha=0.25", "--out", "one"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = dir.path().join("one/config.resolved.json");
    let first: Value = serde_json::from_str(&std::fs::read_to_string(&echoed).unwrap()).unwrap();
    assert_eq!(first["dro"]["alpha"], json!(0.25));
    let o = grdo(&["train", "--config", echoed.to_str().unwrap(), "--out", "two"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let second = std::fs::read_to_string(dir.path().join("two/config.resolved.json")).unwrap();
    assert_eq!(std::fs::read_to_string(&echoed).unwrap(), second);
    assert_eq!(
        std::fs::read(dir.path().join("one/seed_0/metrics.json")).unwrap(),
        std::fs::read(dir.path().join("two/seed_0/metrics.json")).unwrap()
    );
}

fn tree(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p.clone());
            }
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    out.sort();
    out
}

#[test]
fn sweep_compare_and_report_stay_inside_out() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let before = tree(dir.path());
    let run = |args: &[&str]| {
        let o = grdo(args, dir.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["sweep", "--config", cfg, "--out", "out/sweep"]);
    run(&["compare", "--config", cfg, "--out", "out/compare"]);
    let after = tree(dir.path());
    let outside: Vec<_> = after.iter().filter(|p| !p.starts_with("out") && !before.contains(p)).collect();
    assert!(outside.is_empty(), "{outside:?}");

    let summary = std::fs::read_to_string(dir.path().join("out/sweep/sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let comparison = std::fs::read_to_string(dir.path().join("out/compare/comparison.csv")).unwrap();
    let methods: Vec<&str> = comparison.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["wce", "focal", "gdro_alpha_0", "gdro_alpha_0.5"]);

    run(&["report", "--input", "out/sweep/sweep.csv", "--out", "out/report"]);
    assert!(dir.path().join("out/report/report_summary.csv").is_file());
    assert!(dir.path().join("out/report/report_long.csv").is_file());
}

#[test]
fn evaluate_rescores_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = grdo(&["train", "--config", cfg.to_str().unwrap(), "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&cfg).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    std::fs::write(dir.path().join("gen.json"), v["data"]["generate"].to_string()).unwrap();
    let o = grdo(&["generate", "--config", "gen.json", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = grdo(
        &["evaluate", "--checkpoint", "run/seed_0/best.ckpt", "--data", "data/val.jsonl", "--out", "eval"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trained: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/seed_0/metrics.json")).unwrap()).unwrap();
    let rescored: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(trained, rescored);
}

#[test]
fn divergence_exits_2_and_names_the_run_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    std::fs::write(dir.path().join("gen.json"), v["data"]["generate"].to_string()).unwrap();
    let o = grdo(&["generate", "--config", "gen.json", "--out", "data"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let train = dir.path().join("data/train.jsonl");
    let text = std::fs::read_to_string(&train).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut first: Value = serde_json::from_str(&lines[0]).unwrap();
    for row in first["features"].as_array_mut().unwrap() {
        for x in row.as_array_mut().unwrap() {
            *x = json!(f64::MAX);
        }
    }
    lines[0] = first.to_string();
    std::fs::write(&train, lines.join("\n") + "\n").unwrap();
    let o = grdo(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            r#"data={"files":{"train":"data/train.jsonl","val":"data/val.jsonl","num_groups":8}}"#,
            "--set",
            "batch_size=1000",
            "--set",
            "schedule.warmup_steps=0",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("run train/seed_0 failed at step 0"), "{}", stderr(&o));
}
