#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bikanet::synthetic::dead_leaves;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bikanet"));
    c.env_remove("BIKA_SEED").env("RUST_LOG", "warn");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to start the CLI")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `count` synthetic sharp images into `dir`.
pub fn sharp_sources(dir: &Path, count: usize, side: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        dead_leaves(side, side, 100 + i as u64)
            .save_png(dir.join(format!("src{i:02}.png")))
            .unwrap();
    }
    dir.to_path_buf()
}

/// Sharp sources plus a generated dataset under `root/data`.
pub fn dataset(root: &Path, count: usize, crop: usize, seed: u64) -> PathBuf {
    let src = sharp_sources(&root.join("sources"), 3, crop + 16);
    let out = root.join("data");
    run_ok(&[
        "generate",
        "--sharp-dir",
        s(&src),
        "--out",
        s(&out),
        "--count",
        &count.to_string(),
        "--crop",
        &crop.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    out
}
