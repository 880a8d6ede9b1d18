#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rottrans::cli::run_cli;

/// Tiny dataset and model so a full run takes well under a second.
pub const SYNTH_ARGS: [&str; 8] = [
    "--num-ids",
    "8",
    "--num-train-ids",
    "4",
    "--images-per-id",
    "4",
    "--image-size",
    "16",
];

pub const TINY: [&str; 13] = [
    "model.image_height=16",
    "model.image_width=16",
    "model.patch_size=4",
    "model.stride=4",
    "model.embed_dim=8",
    "model.num_heads=2",
    "model.depth=1",
    "model.mlp_ratio=2",
    "train.p=2",
    "train.k=2",
    "train.epochs=2",
    "eval.every=1",
    "eval.max_rank=4",
];

pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("rottrans").chain(args.iter().copied());
    let code = run_cli(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn synth(dir: &Path, seed: u64) {
    let seed = seed.to_string();
    let mut args = vec!["synth", "--out", dir.to_str().unwrap(), "--seed", &seed];
    args.extend(SYNTH_ARGS);
    let o = cli(&args);
    assert_eq!(o.code, 0, "{}", o.stderr);
}

/// `train` on `data` into `out` with the tiny model plus `extra` overrides.
pub fn train(data: &Path, out: &Path, extra: &[&str]) -> Outcome {
    let mut args = vec!["train", "--quiet", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    for o in TINY.iter().chain(extra) {
        args.push("--override");
        args.push(o);
    }
    cli(&args)
}

/// Relative path and contents of every file below `dir`, sorted.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}
