mod common;

use std::path::Path;
use std::process::{Command, Output};

use nerfrestore::image::Image;
use nerfrestore::pipeline::{Model, STAGE2};

fn nerfrestore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nerfrestore"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, common::TINY).unwrap();
    path.to_string_lossy().into_owned()
}

fn untrained_checkpoint(dir: &Path) -> String {
    let cfg = common::tiny_config();
    let path = dir.join("stage2.drnt");
    Model::new(&cfg)
        .unwrap()
        .to_checkpoint(&cfg, STAGE2)
        .save(&path)
        .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn make_dataset_writes_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = nerfrestore(&[
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "-q",
        "make-dataset",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("dataset.drnt").exists());
    let pngs = std::fs::read_dir(out.join("dataset")).unwrap().count();
    assert_eq!(pngs, 8);
}

#[test]
fn restore_writes_an_image_of_the_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    Image::filled(20, 12, [0.2, 0.5, 0.7])
        .save_png(&input)
        .unwrap();
    let output = dir.path().join("out.png");
    let o = nerfrestore(&[
        "restore",
        "--input",
        input.to_str().unwrap(),
        "--checkpoint",
        &ck,
        "--out",
        output.to_str().unwrap(),
        "--w",
        "0.5",
        "--steps",
        "2",
        "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = Image::load_png(&output).unwrap();
    assert_eq!((img.width(), img.height()), (20, 12));
}

#[test]
fn fidelity_outside_unit_interval_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_checkpoint(dir.path());
    let o = nerfrestore(&[
        "restore",
        "--input",
        "x.png",
        "--checkpoint",
        &ck,
        "--out",
        "y.png",
        "--w",
        "1.5",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn missing_checkpoint_fails_with_its_path() {
    let o = nerfrestore(&[
        "restore",
        "--input",
        "x.png",
        "--checkpoint",
        "/nonexistent/ck.drnt",
        "--out",
        "y.png",
    ]);
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("/nonexistent/ck.drnt"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn corrupt_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.drnt");
    std::fs::write(&ck, b"XXXX0000").unwrap();
    let o = nerfrestore(&[
        "restore",
        "--input",
        "x.png",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        "y.png",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("DRNT"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = nerfrestore(&[
        "--out-dir",
        out.to_str().unwrap(),
        "--set",
        "grid.resolutoin=8",
        "make-dataset",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("grid.resolutoin"), "{}", stderr(&o));
}

#[test]
fn stage_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let o = nerfrestore(&["--out-dir", out.to_str().unwrap(), "-q", "train-stage2"]);
    assert!(!o.status.success());
}

#[test]
fn help_lists_subcommands() {
    let o = nerfrestore(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "make-dataset",
        "train-codec",
        "train-stage1",
        "train-stage2",
        "restore",
        "evaluate",
        "run-all",
    ] {
        assert!(text.contains(cmd), "{cmd}");
    }
}
