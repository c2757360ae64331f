use std::path::{Path, PathBuf};
use std::process::Command;

use curvseg::embednet::ModelParams;
use curvseg::io::{decode_ppm, instances_from_container, params_from_container, read_file, TensorContainer};
use curvseg::render::{MULTI_COLOR, PALETTE};
use curvseg::derive_seed;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_curvseg"))
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = bin().args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "{args:?}: {stderr}");
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small scenes so training stays fast.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{"scene": {"height": 16, "width": 16, "instance_count": [2, 2], "stroke_width": [2, 3],
            "control_points": [2, 3], "force_crossing": true},
            "optim": {"epochs": 2, "learning_rate": 0.01, "batch_size": 4}}"#,
    )
    .unwrap();
    path
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_zero_scenes_writes_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("ds");
    ok(&["synth", "--count", "0", "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["scenes"].as_array().unwrap().len(), 0);
}

#[test]
fn synth_is_reproducible_and_manifest_is_consistent() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["synth", "--count", "5", "--seed", "42", "--out", s(&a)]);
    ok(&["synth", "--count", "5", "--seed", "42", "--out", s(&b)]);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_eq!(tree_bytes(&a).len(), 16);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for e in m["scenes"].as_array().unwrap() {
        let c = TensorContainer::decode(&std::fs::read(a.join(e["masks"].as_str().unwrap())).unwrap()).unwrap();
        assert_eq!(instances_from_container(&c).unwrap().len() as u64, e["instances"].as_u64().unwrap());
    }
    let c = t.path().join("c");
    ok(&["synth", "--count", "5", "--seed", "43", "--out", s(&c)]);
    assert_ne!(tree_bytes(&a), tree_bytes(&c));
}

#[test]
fn train_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let ds = t.path().join("ds");
    ok(&["--config", s(&cfg), "synth", "--count", "10", "--out", s(&ds)]);

    let ck0 = t.path().join("ck0");
    ok(&["--config", s(&cfg), "--seed", "5", "train", "--dataset", s(&ds), "--epochs", "0", "--out", s(&ck0)]);
    let p0 = params_from_container(&TensorContainer::decode(&read_file(&ck0.join("checkpoint.segt")).unwrap()).unwrap()).unwrap();
    let init = ModelParams::init(derive_seed(5, 0));
    assert!(p0.to_flat().iter().zip(init.to_flat()).all(|(a, b)| *a == b as f32 as f64));
    assert_eq!(std::fs::read_to_string(ck0.join("loss_log.csv")).unwrap(), "epoch,train_loss,val_loss\n");

    let (ck1, ck2) = (t.path().join("ck1"), t.path().join("ck2"));
    ok(&["--config", s(&cfg), "train", "--dataset", s(&ds), "--out", s(&ck1)]);
    ok(&["--config", s(&cfg), "train", "--dataset", s(&ds), "--out", s(&ck2)]);
    assert_eq!(tree_bytes(&ck1), tree_bytes(&ck2));
    let log = std::fs::read_to_string(ck1.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);

    let ev = t.path().join("ev");
    let ck = ck1.join("checkpoint.segt");
    ok(&["--config", s(&cfg), "eval", "--dataset", s(&ds), "--checkpoint", s(&ck), "--out", s(&ev)]);
    ok(&["--config", s(&cfg), "eval", "--dataset", s(&ds), "--checkpoint", s(&ck), "--method", "cc", "--out", s(&ev)]);
    ok(&["--config", s(&cfg), "eval", "--dataset", s(&ds), "--method", "oracle", "--out", s(&ev)]);
    let load = |name: &str| -> serde_json::Value { serde_json::from_slice(&std::fs::read(ev.join(name)).unwrap()).unwrap() };
    let (emb, cc, oracle) = (load("metrics_embedding.json"), load("metrics_cc.json"), load("metrics_oracle.json"));
    for key in ["iou", "dice", "ap", "ar"] {
        assert_eq!(oracle[key].as_f64(), Some(1.0), "{key}");
    }
    assert_eq!(emb["iou"], cc["iou"]);
    assert_eq!(emb["dice"], cc["dice"]);
    assert_eq!(emb["per_threshold"].as_array().unwrap().len(), 9);
    let rows = std::fs::read_to_string(ev.join("per_image_embedding.csv")).unwrap();
    assert_eq!(rows.lines().count(), 11);
}

#[test]
fn render_and_infer_colors() {
    let t = tempfile::tempdir().unwrap();
    let ds = t.path().join("ds");
    let cfg = t.path().join("c.json");
    std::fs::write(&cfg, r#"{"scene": {"instance_count": [1, 1]}}"#).unwrap();
    ok(&["--config", s(&cfg), "synth", "--count", "1", "--out", s(&ds)]);
    let r = t.path().join("r");
    ok(&["render", "--image", s(&ds.join("scene_0000.pgm")), "--instances", s(&ds.join("scene_0000.segt")), "--out", s(&r)]);
    let (_, _, px) = decode_ppm(&std::fs::read(r.join("overlay.ppm")).unwrap()).unwrap();
    let colored: std::collections::BTreeSet<[u8; 3]> = px.iter().filter(|p| !(p[0] == p[1] && p[1] == p[2])).copied().collect();
    assert_eq!(colored.into_iter().collect::<Vec<_>>(), vec![PALETTE[0]]);

    // Crossing scene: cream pixels match the reported multi-assignment count.
    let ds2 = t.path().join("ds2");
    let cfg2 = small_config(t.path());
    ok(&["--config", s(&cfg2), "synth", "--count", "4", "--out", s(&ds2)]);
    let ck = t.path().join("ck");
    ok(&["--config", s(&cfg2), "train", "--dataset", s(&ds2), "--out", s(&ck)]);
    let inf = t.path().join("inf");
    ok(&[
        "--config", s(&cfg2), "infer", "--checkpoint", s(&ck.join("checkpoint.segt")),
        "--image", s(&ds2.join("scene_0000.pgm")), "--threshold-a", "0.95", "--out", s(&inf),
    ]);
    let diag: serde_json::Value = serde_json::from_slice(&std::fs::read(inf.join("diagnostics.json")).unwrap()).unwrap();
    let (_, _, px) = decode_ppm(&std::fs::read(inf.join("overlay.ppm")).unwrap()).unwrap();
    let cream = px.iter().filter(|p| **p == MULTI_COLOR).count() as u64;
    assert_eq!(cream, diag["multi_assigned_pixels"].as_u64().unwrap());
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("missing");
    assert_eq!(run(&["train", "--dataset", s(&missing)]).0, 3);

    let bad = t.path().join("bad.json");
    std::fs::write(&bad, r#"{"resolve_typo": 1}"#).unwrap();
    assert_eq!(run(&["--config", s(&bad), "synth", "--count", "1", "--out", s(&missing)]).0, 2);

    let invalid = t.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"pipeline": {"resolve": {"threshold_a": 0.3}}}"#).unwrap();
    assert_eq!(run(&["--config", s(&invalid), "synth", "--count", "1", "--out", s(&missing)]).0, 2);

    let ds = t.path().join("ds");
    ok(&["synth", "--count", "1", "--out", s(&ds)]);
    assert_eq!(run(&["train", "--dataset", s(&ds), "--out", s(&missing)]).0, 2);
    assert_eq!(run(&["eval", "--dataset", s(&ds), "--out", s(&missing)]).0, 2);

    let garbage = t.path().join("garbage.segt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(run(&["eval", "--dataset", s(&ds), "--checkpoint", s(&garbage), "--out", s(&missing)]).0, 2);

    let diverge = t.path().join("diverge.json");
    std::fs::write(&diverge, r#"{"optim": {"learning_rate": 1e300, "epochs": 2, "batch_size": 1}}"#).unwrap();
    let ds2 = t.path().join("ds2");
    ok(&["synth", "--count", "3", "--out", s(&ds2)]);
    assert_eq!(run(&["--config", s(&diverge), "train", "--dataset", s(&ds2), "--out", s(&missing)]).0, 4);
}

#[test]
fn checkpoint_dataset_size_mismatch_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let cfg = small_config(t.path());
    let ds = t.path().join("ds");
    ok(&["--config", s(&cfg), "synth", "--count", "3", "--out", s(&ds)]);
    let ck = t.path().join("ck");
    ok(&["--config", s(&cfg), "train", "--dataset", s(&ds), "--epochs", "0", "--out", s(&ck)]);
    let big = t.path().join("big");
    ok(&["synth", "--count", "1", "--out", s(&big)]);
    let (code, _, err) = run(&["eval", "--dataset", s(&big), "--checkpoint", s(&ck.join("checkpoint.segt")), "--out", s(&t.path().join("e"))]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn gradcheck_reports_small_errors() {
    let t = tempfile::tempdir().unwrap();
    let stdout = ok(&["gradcheck", "--fixtures", "1", "--out", s(t.path())]);
    assert!(stdout.contains("max rel error"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(t.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(r["total_max_rel_error"].as_f64().unwrap() <= 1e-4);
}
