use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neuroalign"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// Desk preset shrunk to an 8³ grid, 18 subjects and two epochs.
fn tiny_config(dir: &Path) -> PathBuf {
    let out = ok(&["inspect", "--preset", "desk", "--seed", "3"]);
    let mut cfg: Value = serde_json::from_str(&out).unwrap();
    let mut c = cfg["config"].take();
    let grid = json!({"dims": [8, 8, 8], "patch": [4, 4, 4]});
    c["cohort"]["grid"] = grid.clone();
    c["cohort"]["subjects_per_class"] = json!([6, 6, 6]);
    let v = &mut c["experiment"]["model"]["vision"];
    v["grid"] = grid;
    v["embed_dim"] = json!(16);
    v["heads"] = json!(2);
    v["prompt_len"] = json!(2);
    let t = &mut c["experiment"]["model"]["text"];
    t["embed_dim"] = json!(16);
    t["layers"] = json!(1);
    t["heads"] = json!(2);
    t["prompt_len"] = json!(2);
    t["max_tokens"] = json!(64);
    c["experiment"]["train"]["epochs"] = json!(2);
    c["experiment"]["train"]["batch_size"] = json!(4);
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_vec_pretty(&c).unwrap()).unwrap();
    path
}

fn first_test_scan(data: &Path) -> String {
    let m: Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    m["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["split"] == "test")
        .unwrap()["scan_id"]
        .as_str()
        .unwrap()
        .to_string()
}

#[test]
fn help_lists_commands_and_flags() {
    let top = ok(&["--help"]);
    for cmd in [
        "gen-data",
        "train",
        "eval",
        "sweep",
        "ablate",
        "attribute",
        "heatmap",
        "inspect",
    ] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
    let train = ok(&["train", "--help"]);
    for flag in [
        "--config",
        "--out",
        "--seed",
        "--preset",
        "--peft",
        "--prompt-mode",
        "--temp-mode",
        "--lambda",
        "--classes",
        "--epochs",
        "--data",
    ] {
        assert!(train.contains(flag), "train --help lacks {flag}");
    }
    let heat = ok(&["heatmap", "--help"]);
    for flag in ["--ckpt", "--scan", "--keep", "--layer", "--pgm"] {
        assert!(heat.contains(flag), "heatmap --help lacks {flag}");
    }
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        vec!["frobnicate"],
        vec!["train", "--out", "x", "--bogus"],
        vec!["train", "--out", "x", "--peft", "prefix"],
        vec!["train", "--out", "x", "--classes", "NC,XYZ"],
        vec!["train"],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: kind=usage msg=\""), "{}", stderr(&o));
    }
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"cohort": {}, "experiment": {}, "extra": 1}"#).unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=invalid_config"));

    let o = run(&[
        "train",
        "--config",
        dir.path().join("missing.json").to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(3));

    for args in [
        vec!["train", "--lambda", "-1", "--out", out],
        vec!["train", "--classes", "AD", "--out", out],
        vec!["ablate", "--rows", "q", "--out", out],
    ] {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(3), "{args:?}: {}", stderr(&o));
    }

    let tiny = tiny_config(dir.path());
    let mut c: Value = serde_json::from_slice(&fs::read(&tiny).unwrap()).unwrap();
    c["experiment"]["model"]["vision"]["grid"]["patch"] = json!([3, 4, 4]);
    fs::write(&tiny, serde_json::to_vec(&c).unwrap()).unwrap();
    let o = run(&["gen-data", "--config", tiny.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--ckpt", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: kind="));
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    ok(&["gen-data", "--config", cfg, "--out", &p("d1")]);
    assert!(dir.path().join("d1/manifest.json").exists());
    assert!(dir.path().join("d1/resolved_config.json").exists());

    ok(&[
        "train",
        "--config",
        cfg,
        "--data",
        &p("d1"),
        "--peft",
        "prompt",
        "--out",
        &p("t1"),
    ]);
    for f in ["checkpoint/manifest.json", "metrics.jsonl", "resolved_config.json"] {
        assert!(dir.path().join("t1").join(f).exists(), "missing {f}");
    }
    let lines = fs::read_to_string(dir.path().join("t1/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let metrics: Value = serde_json::from_str(&ok(&["eval", "--ckpt", &p("t1")])).unwrap();
    assert_eq!(metrics["n"], 3);
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let scan = first_test_scan(&dir.path().join("d1"));
    ok(&[
        "heatmap",
        "--ckpt",
        &p("t1"),
        "--scan",
        &scan,
        "--keep",
        "ventricular",
        "--pgm",
        "--out",
        &p("h1"),
    ]);
    let stem = format!("heatmap_{scan}_ventricular");
    let sidecar: Value =
        serde_json::from_slice(&fs::read(dir.path().join(format!("h1/{stem}.json"))).unwrap()).unwrap();
    // one value per 4³ patch of the 8³ volume
    assert_eq!(sidecar["dims"], json!([2, 2, 2]));
    assert_eq!(sidecar["formula"], "grad-eclip-style");
    assert_eq!(
        fs::metadata(dir.path().join(format!("h1/{stem}.f32"))).unwrap().len(),
        2 * 2 * 2 * 4
    );
    assert!(dir.path().join(format!("h1/{stem}.pgm")).exists());

    let table = ok(&["attribute", "--ckpt", &p("t1"), "--steps", "4", "--out", &p("a1")]);
    assert!(table.starts_with("Stage | Top 1"));
    assert_eq!(table.lines().count(), 4);

    let inspect: Value = serde_json::from_str(&ok(&["inspect", "--ckpt", &p("t1")])).unwrap();
    assert!(inspect["checkpoint_epoch"].as_u64().unwrap() >= 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = ok(&[
        "inspect",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--peft",
        "lora",
        "--prompt-mode",
        "shallow",
        "--temp-mode",
        "divide",
        "--lambda",
        "0.25",
        "--classes",
        "NC,AD",
        "--epochs",
        "7",
    ]);
    let v: Value = serde_json::from_str(&out).unwrap();
    let c = &v["config"];
    assert_eq!(c["cohort"]["seed"], 9);
    assert_eq!(c["experiment"]["train"]["seed"], 9);
    assert_eq!(c["experiment"]["train"]["lambda"], 0.25);
    assert_eq!(c["experiment"]["train"]["epochs"], 7);
    assert_eq!(c["experiment"]["train"]["classes"], json!(["NC", "AD"]));
    assert_eq!(c["experiment"]["model"]["vision"]["prompt_mode"], "shallow");
    assert_eq!(c["experiment"]["model"]["temp_mode"], "divide");
    assert_eq!(c["experiment"]["model"]["peft"]["kind"], "lora");
}

#[test]
fn training_is_reproducible_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for run_dir in ["r1", "r2"] {
        ok(&[
            "train",
            "--config",
            cfg,
            "--out",
            dir.path().join(run_dir).to_str().unwrap(),
        ]);
    }
    let read = |r: &str, f: &str| fs::read(dir.path().join(r).join(f)).unwrap();
    for f in [
        "metrics.jsonl",
        "checkpoint/manifest.json",
        "checkpoint/manifest.sha256",
    ] {
        assert_eq!(read("r1", f), read("r2", f), "{f} differs");
    }
}
