//! Helpers for driving the compiled binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Overrides that keep every subcommand well under a second.
pub const TINY: &[&str] = &[
    "seed=7",
    "rollout.n_prompts=6",
    "rollout.k=4",
    "model.hidden=8",
    "base.warmup_steps=5",
    "stage1.steps=12",
    "stage1.minibatch=8",
    "stage1.snapshot_every=4",
    "stage1.unlearn_capture_step=6",
    "stage2.steps=4",
    "pipeline.n_batches=2",
    "online.steps=4",
    "online.n_prompts=2",
    "online.k=4",
    "eval.K=4",
    "eval.kl_rollouts=8",
];

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_distill-lab")
}

/// Runs `distill-lab <cmd> --out <out> [--set ..]* [extra ..]`.
pub fn run(cmd: &str, out: &Path, sets: &[&str], extra: &[&str]) -> Output {
    let mut c = Command::new(bin());
    c.arg(cmd).arg("--out").arg(out);
    for s in sets {
        c.arg("--set").arg(s);
    }
    c.args(extra);
    c.output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// The command sequence exercised by the determinism checks.
pub const SEQUENCE: &[(&str, &[&str])] = &[
    ("rollout", &[]),
    ("train-teacher", &[]),
    ("distill", &["--emit-signal"]),
    ("pipeline", &[]),
    ("online", &[]),
    ("eval", &[]),
];

/// Runs [`SEQUENCE`] into `out`; returns the first failure.
pub fn run_sequence(out: &Path, sets: &[&str]) -> Result<(), String> {
    for (cmd, extra) in SEQUENCE {
        let o = run(cmd, out, sets, extra);
        if !o.status.success() {
            return Err(format!("{cmd} failed: {}", stderr(&o)));
        }
    }
    Ok(())
}

/// Runs the sequence twice in fresh directories and compares every output byte.
pub fn determinism(sets: &[&str]) -> Result<usize, String> {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_sequence(a.path(), sets)?;
    run_sequence(b.path(), sets)?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    if ta.keys().ne(tb.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", ta.keys(), tb.keys()));
    }
    for (path, bytes) in &ta {
        if tb[path] != *bytes {
            return Err(format!("{} differs between runs", path.display()));
        }
    }
    Ok(ta.len())
}
