#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough to run the whole pipeline in seconds.
pub const TINY_CONFIG: &str = r#"{
  "seed": 3,
  "horizon": 10,
  "data": {"mixture": {
    "spec": {
      "means": [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.6, 0.0]],
      "std": 0.1,
      "weights": [0.24, 0.24, 0.24, 0.24, 0.04],
      "counts": [24, 24, 24, 24, 4]
    },
    "forget_component": 4
  }},
  "model": {"hidden": [16, 16]},
  "pretrain": {"steps": 60, "batch": 32},
  "unlearn": {"steps": 8, "k": 3, "balance_probes": 8, "batch_remain": 8, "batch_forget": 4},
  "eval": {"n_samples": 200, "n_mc": 4, "nll_remain_points": 5, "recon_repeats": 2,
           "oracle_t_grid": [1, 5], "oracle_probes_per_point": 2},
  "sweep": {"k": [1, 3], "lambda": [0.0, 1.0], "retained_loss_draws": 64},
  "verify": {"unbiased_draws": 5000, "ranking_datasets": 2, "ranking_points": 20,
             "truncation_draws": 100, "stationarity_steps": 50}
}"#;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_unlearn-lab")
}

/// Writes `text` as `config.json` under `dir`.
pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs the binary with `--config` and `--out` set.
pub fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited by signal")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs `args` and asserts exit status 0.
pub fn ok(config: &Path, out: &Path, args: &[&str]) -> Output {
    let o = run(config, out, args);
    assert_eq!(code(&o), 0, "{args:?} failed: {}", stderr(&o));
    o
}

/// Every CSV below `root`, relative path first, sorted.
pub fn csv_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, acc);
            } else if path.extension().is_some_and(|e| e == "csv") {
                acc.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort();
    acc
}

/// Runs gen-data, pretrain, unlearn and evaluate.
pub fn full_pipeline(config: &Path, out: &Path) {
    for cmd in ["gen-data", "pretrain", "unlearn", "evaluate"] {
        ok(config, out, &[cmd]);
    }
}
