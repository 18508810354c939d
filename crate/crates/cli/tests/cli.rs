use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mvrestore"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn mvrestore")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "not a single line: {text}");
    text.trim_end().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_scene(dir: &Path, views: usize, h: usize, w: usize, seed: u64) -> PathBuf {
    let out = dir.join("scene");
    ok(&[
        "--seed",
        &seed.to_string(),
        "gen-scene",
        "--out",
        s(&out),
        "--views",
        &views.to_string(),
        "--height",
        &h.to_string(),
        "--width",
        &w.to_string(),
    ]);
    out
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_documents_subcommands_and_exits_zero() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["synth", "select-views", "train", "restore", "eval", "plot", "--seed"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let out = run(&["restore", "--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("--sampler"));
}

#[test]
fn usage_errors_are_single_line() {
    let out = run(&["synth", "--task", "denoise"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[usage]: "));
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[usage]: "));
}

#[test]
fn missing_scene_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["synth", "--scene", s(&missing), "--task", "sr", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[input]: ") && line.contains("nope"), "{line}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml"))
        .unwrap()
        .replace("batch_sets = 1", "batch_sets = 1\nwarmup_steps = 100");
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, text).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[config]: ") && line.contains("warmup_steps"), "{line}");
}

#[test]
fn eval_on_ground_truth_copies_is_perfect() {
    let dir = TempDir::new().unwrap();
    let scene = gen_scene(dir.path(), 3, 64, 96, 4);
    let rgb = dir.path().join("rgb.json");
    ok(&["eval", "--task", "deblur", "--pred-dir", s(&scene.join("images")), "--gt-scene", s(&scene), "--out", s(&rgb)]);
    let r = report(&rgb);
    assert_eq!(r["psnr"], 99.0);
    assert_eq!(r["ssim"], 1.0);
    assert_eq!(r["vconsis"], 0.0);
    assert!(r["n_patches"].as_u64().unwrap() > 0);
    let depth = dir.path().join("depth.json");
    ok(&["eval", "--task", "depth", "--pred-dir", s(&scene.join("depth")), "--gt-scene", s(&scene), "--out", s(&depth)]);
    let r = report(&depth);
    assert_eq!(r["gconsis"], 0.0);
    assert_eq!(r["absrel"], 0.0);
    assert_eq!(r["delta1"], 100.0);
}

#[test]
fn synth_is_seeded_and_idempotent() {
    let dir = TempDir::new().unwrap();
    let scene = gen_scene(dir.path(), 2, 32, 48, 1);
    let synth = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        ok(&["--seed", seed, "synth", "--scene", s(&scene), "--task", "deblur", "--out", s(&out)]);
        fs::read(out.join("images/0001.png")).unwrap()
    };
    let a = synth("5", "a");
    assert_eq!(a, synth("5", "b"));
    assert_ne!(a, synth("6", "c"));
    let sr = dir.path().join("sr");
    ok(&["synth", "--scene", s(&scene), "--task", "sr", "--factor", "2", "--out", s(&sr)]);
    assert_eq!(fs::read(sr.join("poses.json")).unwrap(), fs::read(scene.join("poses.json")).unwrap());
}

#[test]
fn select_views_writes_lists_per_scene() {
    let dir = TempDir::new().unwrap();
    let scene = gen_scene(dir.path(), 5, 32, 48, 2);
    let out = dir.path().join("vs.json");
    ok(&["select-views", "--scene", s(&scene), "--range", "0.0", "1.0", "--list-size", "2", "--out", s(&out)]);
    let r = report(&out);
    let lists = r["scene"].as_object().unwrap();
    assert_eq!(lists.len(), 5);
    assert!(lists.values().all(|l| l.as_array().unwrap().len() <= 2));
    let bad = run(&["select-views", "--scene", s(&scene), "--range", "0.9", "0.1", "--out", s(&out)]);
    assert!(stderr_line(&bad).starts_with("error[usage]: "));
}

#[test]
fn plot_reads_only_artifacts() {
    let dir = TempDir::new().unwrap();
    let loss = dir.path().join("loss.csv");
    fs::write(&loss, "step,loss,k\n0,1.0,5\n1,0.5,9\n2,0.25,1\n").unwrap();
    let rep = dir.path().join("report.json");
    fs::write(&rep, r#"{"psnr": 21.5, "vconsis": null}"#).unwrap();
    let out = dir.path().join("plots");
    ok(&["plot", "--loss", s(&loss), "--report", s(&rep), "--out", s(&out)]);
    assert!(fs::read_to_string(out.join("loss.svg")).unwrap().contains("<polyline"));
    assert!(fs::read_to_string(out.join("metrics.svg")).unwrap().contains("21.500"));
    let missing = run(&["plot", "--report", s(&rep), "--metric", "fid", "--out", s(&out)]);
    assert!(stderr_line(&missing).contains("fid"));
}
