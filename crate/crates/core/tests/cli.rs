use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use toothscan::image::read_pgm;

const SMALL: &str = "\
train_scenes = 6
val_scenes = 2
det_epochs = 1
det_batch = 4
crop = 16
crops_per_scene = 1
probe_crops_per_scene = 2
hena_batch = 4
carseg_epochs = 1
ad_epochs = 1
dds_epochs = 1
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_toothscan"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn toothscan");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path and bytes, in sorted order.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = bin().args(["synth", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        run(&["synth", "--seed", "7", "--config", s(&cfg), "--out", s(d)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn eval_on_identical_files_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    run(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let boxes = data.join("boxes.jsonl");
    let out = run(&["eval", "--pred", s(&boxes), "--gt", s(&boxes)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["map50"], 1.0);
    assert_eq!(v["map5095"], 1.0);
}

#[test]
fn infer_masks_match_the_input_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = tmp.path().join("data");
    let (det, hena, inf) = (tmp.path().join("det"), tmp.path().join("hena"), tmp.path().join("inf"));
    run(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    run(&["train-detect", "--config", s(&cfg), "--data", s(&data), "--out", s(&det)]);
    run(&["train-hena", "--config", s(&cfg), "--data", s(&data), "--out", s(&hena)]);
    let image = data.join("images/00000.pgm");
    let out = run(&[
        "infer",
        "--config",
        s(&cfg),
        "--detector",
        s(&det.join("checkpoint")),
        "--hena",
        s(&hena.join("stage3")),
        "--image",
        s(&image),
        "--out",
        s(&inf),
    ]);
    let (w, h, _) = read_pgm(&mut fs::read(&image).unwrap().as_slice()).unwrap();
    for m in ["carseg.pgm", "ad.pgm"] {
        let (mw, mh, _) = read_pgm(&mut fs::read(inf.join(m)).unwrap().as_slice()).unwrap();
        assert_eq!((mw, mh), (w, h), "{m}");
    }
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(w as u64), Some(h as u64)));
}
