mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fpt_core::synth::Dataset;
use serde_json::Value;

fn fpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpt"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = fpt(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(fpt(&["--help"]).status.code(), Some(0));
    assert_eq!(fpt(&["--version"]).status.code(), Some(0));
    assert_eq!(fpt(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fpt(&["gen-data", "--n-scenes", "x"]).status.code(), Some(2));
    let out = fpt(&[
        "eval",
        "--ckpt",
        "/nonexistent.fptc",
        "--data",
        "/nonexistent.fptd",
        "--report-out",
        "/tmp/r.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.fptd");
    ok(&[
        "gen-data",
        "--templates",
        "hinge",
        "--n-scenes",
        "0",
        "--seed",
        "1",
        "--out",
        s(&out),
    ]);
    assert!(Dataset::read(&out).unwrap().scenes.is_empty());
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (p, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&[
            "gen-data",
            "--templates",
            "hinge,stack",
            "--n-scenes",
            "2",
            "--seed",
            seed,
            "--image-size",
            "16",
            "--out",
            s(p),
        ]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(Dataset::read(&a).unwrap().scenes.len(), 2);
}

#[test]
fn ar_sampling_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, data) = common::fixtures(dir.path());
    let pokes = dir.path().join("pokes.json");
    fs::write(&pokes, r#"[{"x":0.3,"y":0.6,"dx":0.04,"dy":-0.02}]"#).unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&[
            "sample",
            "--ckpt",
            s(&ck),
            "--scene",
            "1",
            "--data",
            s(&data),
            "--pokes-json",
            s(&pokes),
            "--method",
            "ar",
            "--seed",
            seed,
            "--grid",
            "8",
            "--out",
            s(&out),
        ]);
        fs::read(out).unwrap()
    };
    let a = run("a.f32", "7");
    assert_eq!(a.len(), 8 * 8 * 2 * 4);
    assert_eq!(a, run("b.f32", "7"));
    assert_ne!(a, run("c.f32", "8"));

    let json = dir.path().join("mean.json");
    ok(&[
        "sample",
        "--ckpt",
        s(&ck),
        "--scene",
        "0",
        "--data",
        s(&data),
        "--grid",
        "4",
        "--out",
        s(&json),
    ]);
    let v: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(v["grid"], 4);
    assert_eq!(v["flows"].as_array().unwrap().len(), 16);
    let png = dir.path().join("mean.png");
    ok(&[
        "sample",
        "--ckpt",
        s(&ck),
        "--scene",
        "0",
        "--data",
        s(&data),
        "--grid",
        "4",
        "--out",
        s(&png),
    ]);
    assert_eq!(&fs::read(&png).unwrap()[..4], b"\x89PNG");
}

#[test]
fn incompatible_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = common::fixtures(dir.path());
    let big = dir.path().join("big.fptd");
    ok(&[
        "gen-data",
        "--templates",
        "hinge",
        "--n-scenes",
        "1",
        "--seed",
        "1",
        "--image-size",
        "32",
        "--out",
        s(&big),
    ]);
    let out = fpt(&[
        "sample",
        "--ckpt",
        s(&ck),
        "--scene",
        "0",
        "--data",
        s(&big),
        "--out",
        s(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("train.fptd");
    ok(&[
        "gen-data",
        "--templates",
        "hinge,drawer",
        "--n-scenes",
        "6",
        "--seed",
        "1",
        "--image-size",
        "16",
        "--n-tracks",
        "24",
        "--out",
        s(&data),
    ]);
    let cfg = serde_json::json!({
        "model": { "depth": 1, "width": 16, "heads": 2, "k": 2, "num_freq": 2, "image_size": 16, "encoder_depth": 1 },
        "train": { "batch_size": 2, "np_max": 8, "nq": 8, "n_tracks": 24, "steps": 6, "warmup_steps": 2, "eval_every": 3 }
    });
    let cfg_path = d.join("config.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let run = d.join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--eval-data",
        s(&data),
        "--calib-data",
        s(&data),
        "--config",
        s(&cfg_path),
        "--out",
        s(&run),
    ]);
    let lines: Vec<Value> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        lines
            .iter()
            .map(|l| l["step"].as_u64().unwrap())
            .collect::<Vec<_>>(),
        [0, 3, 6]
    );
    assert!(lines.iter().all(|l| l["eval_nll"].is_number()));

    let ck = run.join("model.fptc");
    let threshold = fpt_core::model::load_checkpoint(&ck)
        .unwrap()
        .meta
        .segmentation_threshold;
    assert!(threshold.is_some_and(|t| t > 0.0));

    let report = d.join("report.json");
    ok(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--report-out",
        s(&report),
        "--grid",
        "8",
    ]);
    let v: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for key in ["epe", "pck", "miou", "pearson_rho"] {
        assert!(v[key].is_number(), "{key}: {}", v[key]);
    }

    // Resuming with a longer schedule appends to the log.
    let mut longer = cfg.clone();
    longer["train"]["steps"] = 9.into();
    fs::write(&cfg_path, longer.to_string()).unwrap();
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg_path),
        "--out",
        s(&run),
        "--resume",
    ]);
    let steps: Vec<u64> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, [0, 3, 6, 9]);
}
