#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub fn pathwayforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathwayforge"))
        .args(args)
        .env_remove("PATHWAYFORGE_DATA")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

/// Runs the command and returns its stdout, panicking with stderr on failure.
pub fn ok(args: &[&str]) -> String {
    let o = pathwayforge(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

pub struct SmallRun {
    pub root: PathBuf,
    pub weights: PathBuf,
    pub runs: PathBuf,
    pub run: PathBuf,
    pub data: PathBuf,
    pub stdout: Vec<String>,
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A two-class pipeline small enough for debug builds, driven stage by stage
/// through the binary. Built once per test target.
pub fn small_run() -> &'static SmallRun {
    static RUN: OnceLock<SmallRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let weights = root.join("small.pfwt");
        let runs = root.join("runs");
        let data = root.join("data");
        let mut stdout = Vec::new();
        stdout.push(ok(&[
            "train", "--seed", "7", "--classes", "2", "--per-class", "50", "--epochs", "3", "--out", s(&weights),
        ]));
        stdout.push(ok(&[
            "attack", "--weights", s(&weights), "--original", "0", "--target", "1", "--eps", "0.25,0.5", "--steps", "6",
            "--max-images", "4", "--created-at", "1700000000", "--out", s(&runs),
        ]));
        let run = runs.join("pair_0_1");
        stdout.push(ok(&["extract", "--run", s(&run), "--benign-k", "2", "--attacked-k", "1"]));
        stdout.push(ok(&["explain", "--run", s(&run), "--patches", "2", "--fv-steps", "4"]));
        stdout.push(ok(&["export", "--run", s(&run), "--out", s(&data)]));
        SmallRun { root, weights, runs, run, data, stdout }
    })
}
