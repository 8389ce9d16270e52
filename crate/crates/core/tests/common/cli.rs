//! Helpers for driving the `irisseg` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const TINY_MODEL: &str = "\
stage_channels=3,3,4,4,4
fpn_channels=3
fc_dim=4
mask_channels=2
anchor_strides=8,16
anchor_sizes=24,48
rpn_batch=16
train_proposals=10
";

pub const TINY_DATA: &str = "\
tag=tiny
width=64
height=64
scale_mean=0.3
subjects=4
";

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irisseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning irisseg")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "irisseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Writes the tiny model config and generator spec into `dir`.
pub fn tiny_files(dir: &Path) -> (String, String) {
    let (model, data) = (dir.join("tiny.conf"), dir.join("tiny.spec"));
    fs::write(&model, TINY_MODEL).unwrap();
    fs::write(&data, TINY_DATA).unwrap();
    (model.display().to_string(), data.display().to_string())
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}
