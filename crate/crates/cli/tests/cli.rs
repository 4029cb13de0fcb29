use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rgbx_depth::io::{read_depth, sample_path};

fn rgbx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgbx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "epochs": 1,
  "batch_size": 2,
  "lr": 0.001,
  "val_fraction": 0.25,
  "net": {"levels": 2, "base_channels": 4, "blocks_per_level": 1, "block_kind": "ReZero", "in_channels": 5, "out_channels": 1},
  "augment": {"target_height": 32, "hole_bank_size": 4}
}"#;

#[test]
fn synth_augment_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let aug = dir.path().join("aug");
    let cfg = dir.path().join("train.json");
    let ckpt = dir.path().join("net.ckpt");
    let report = dir.path().join("report.json");
    let out = dir.path().join("pred.pfm");
    fs::write(&cfg, TINY).unwrap();

    let r = rgbx(&[
        "synth",
        "--n",
        "8",
        "--out",
        s(&data),
        "--seed",
        "4",
        "--height",
        "32",
        "--width",
        "48",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(sample_path(&data, "scene_00007", "gt.pfm").exists());

    let r = rgbx(&["augment", "--in", s(&data), "--out", s(&aug), "--seed", "1"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let x = read_depth(sample_path(&aug, "scene_00000", "x.pfm")).unwrap();
    assert_eq!(x.dims(), (64, 96));

    let r = rgbx(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(ckpt.exists() && ckpt.with_extension("jsonl").exists());

    let r = rgbx(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--sparsity",
        "0,0.01,1",
        "--report",
        s(&report),
        "--height",
        "32",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(table["levels"].as_array().unwrap().len(), 3);

    let rgb = sample_path(&data, "scene_00001", "rgb.ppm");
    let r = rgbx(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--rgb",
        s(&rgb),
        "--out",
        s(&out),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let d = read_depth(&out).unwrap();
    assert_eq!(d.dims(), (32, 48));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let r = rgbx(&[
        "infer",
        "--ckpt",
        s(&missing),
        "--rgb",
        "x.ppm",
        "--out",
        "y.pfm",
    ]);
    assert_eq!(r.status.code(), Some(2));

    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let r = rgbx(&[
        "infer",
        "--ckpt",
        s(&bad),
        "--rgb",
        "x.ppm",
        "--out",
        "y.pfm",
    ]);
    assert_eq!(r.status.code(), Some(2));

    let r = rgbx(&["synth", "--n", "0", "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(1));

    let r = rgbx(&["synth"]);
    assert_eq!(r.status.code(), Some(1));

    let r = rgbx(&["selftest"]);
    assert_eq!(r.status.code(), Some(0));
    assert!(!String::from_utf8_lossy(&r.stdout).contains("FAIL"));
}
