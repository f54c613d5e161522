//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::distill::build_signal;
use crate::env::{read_batch_dump, write_batch_dump, TokenTable, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::pipeline::{batch_dir, batch_schedule, run_pipeline};
use crate::harness::store::SnapshotStore;
use crate::harness::train::{run_online, stage1_train, stage2_distill, Lab};
use crate::metrics::{batch_entropy, write_metrics_csv, MetricsRow, Phase};
use crate::policy::{read_checkpoint, restore, snapshot, write_checkpoint, PolicyParams};

#[derive(Debug, Parser)]
#[command(name = "distill-lab", version, about = "Two-stage teacher/student policy training on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat `dotted.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the base policy and collect one rollout batch.
    Rollout(Common),
    /// Train the stage-1 teacher on batch 0 (collecting it if absent).
    TrainTeacher(Common),
    /// Distill a student from the snapshots written by `train-teacher`.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Also write the per-token signal table.
        #[arg(long)]
        emit_signal: bool,
    },
    /// Run the multi-batch pipeline.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Reuse batches already completed in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// On-policy GRPO baseline.
    Online(Common),
    /// AVG@K of the base policy or of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_lab(common: &Common) -> Result<Lab> {
    let text = match &common.config {
        Some(path) => Some(fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    Lab::new(RunConfig::from_sources(text.as_deref(), &common.set)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn snapshots_dir(out: &Path) -> PathBuf {
    batch_dir(out, 0).join("snapshots")
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Rollout(c) => {
            let lab = load_lab(&c)?;
            let (base, batch) = fresh_batch(&lab)?;
            save_batch(&c.out, &base, &batch)
        }
        Command::TrainTeacher(c) => {
            let lab = load_lab(&c)?;
            let (mut store, batch) = load_or_collect(&lab, &c.out)?;
            let table = TokenTable::from_batch(&batch, &lab.enc);
            let mut metrics = stage1_train(&lab, &lab.cfg.stage1, &table, &mut store, 0)?.metrics;
            if lab.cfg.teacher2.enabled {
                metrics.extend(stage1_train(&lab, &lab.cfg.teacher2, &table, &mut store, 0)?.metrics);
            }
            let dir = batch_dir(&c.out, 0);
            store.write_dir(&snapshots_dir(&c.out))?;
            write(&dir.join("teacher.ckpt"), &write_checkpoint(store.get("extreme")?))?;
            write(&dir.join("metrics.csv"), &write_metrics_csv(&metrics))
        }
        Command::Distill { common: c, emit_signal } => {
            let lab = load_lab(&c)?;
            let store = SnapshotStore::read_dir(&snapshots_dir(&c.out))?;
            let (specs, blocks) = batch_schedule(&lab, 0)?;
            store.require(["old"])?;
            for spec in &specs {
                store.require(spec.required_tags())?;
            }
            let dir = batch_dir(&c.out, 0);
            let dump_path = dir.join("batch.dump");
            let text = fs::read_to_string(&dump_path).map_err(|e| Error::io(&dump_path, e))?;
            let batch = read_batch_dump(&text)?;
            let table = TokenTable::from_batch(&batch, &lab.enc);
            let out = stage2_distill(&lab, &lab.cfg.stage2, &specs, &blocks, &table, &store, 0)?;
            if emit_signal {
                let old = store.restore("old")?;
                let signal = build_signal(&table, &specs[0], &store, &old)?;
                write(&dir.join("signal.csv"), &signal.to_columns())?;
            }
            write(&dir.join("student.ckpt"), &write_checkpoint(&snapshot(&out.student, 0, "student.b0")?))?;
            write(&dir.join("distill_metrics.csv"), &write_metrics_csv(&out.metrics))
        }
        Command::Pipeline { common: c, resume } => {
            let lab = load_lab(&c)?;
            run_pipeline(&lab, Some(&c.out), resume).map(|_| ())
        }
        Command::Online(c) => {
            let lab = load_lab(&c)?;
            let base = lab.base_policy()?;
            let out = run_online(&lab, &base, lab.cfg.online.steps, 0)?;
            write(&c.out.join("online").join("metrics.csv"), &write_metrics_csv(&out.metrics))?;
            write(
                &c.out.join("online").join("policy.ckpt"),
                &write_checkpoint(&snapshot(&out.policy, lab.cfg.online.steps, "online")?),
            )
        }
        Command::Eval { common: c, checkpoint } => {
            let lab = load_lab(&c)?;
            let base = lab.base_policy()?;
            let (policy, step) = match &checkpoint {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let snap = read_checkpoint(&text)?;
                    (restore(&snap), snap.step())
                }
                None => (base.clone(), 0),
            };
            if policy.shape() != lab.shape {
                return Err(Error::config("checkpoint does not match the configured model"));
            }
            let row = eval_row(&lab, &policy, &base, step)?;
            write(&c.out.join("eval.csv"), &write_metrics_csv(&[row]))
        }
    }
}

/// Single evaluation row: AVG@K, drift from the base policy and the mean
/// entropy over states visited by one fresh rollout per prompt.
fn eval_row(lab: &Lab, policy: &PolicyParams, base: &PolicyParams, step: usize) -> Result<MetricsRow> {
    let mut row = MetricsRow::new(step, Phase::Eval);
    let eval = lab.evaluate(policy)?;
    row.avg_at_k = Some(eval.avg);
    row.objective = eval.avg;
    row.reverse_kl = lab.reverse_kl(policy, base)?.mean;
    let mut rng = lab.rng("eval_entropy", 0);
    let mut groups = Vec::with_capacity(lab.eval_prompts.len());
    for prompt in &lab.eval_prompts {
        groups.push(vec![crate::env::rollout(policy, &lab.enc, prompt, 1.0, &mut rng)?]);
    }
    let batch = TrajectoryBatch::new(lab.cfg.env, groups, "eval", false)?;
    row.entropy = batch_entropy(&TokenTable::from_batch(&batch, &lab.enc), policy)?;
    Ok(row)
}

fn fresh_batch(lab: &Lab) -> Result<(PolicyParams, TrajectoryBatch)> {
    let base = lab.base_policy()?;
    let batch = lab.collect(&base, 0, "old")?;
    Ok((base, batch))
}

fn save_batch(out: &Path, base: &PolicyParams, batch: &TrajectoryBatch) -> Result<()> {
    let dir = batch_dir(out, 0);
    write(&dir.join("batch.dump"), &write_batch_dump(batch)?)?;
    let mut store = SnapshotStore::new();
    store.insert(snapshot(base, 0, "old")?)?;
    store.write_dir(&snapshots_dir(out))
}

/// Reuses batch 0 and its collector from `out` when present.
fn load_or_collect(lab: &Lab, out: &Path) -> Result<(SnapshotStore, TrajectoryBatch)> {
    let dump_path = batch_dir(out, 0).join("batch.dump");
    let old_path = snapshots_dir(out).join("old.ckpt");
    let (old, batch) = if dump_path.is_file() && old_path.is_file() {
        let text = fs::read_to_string(&dump_path).map_err(|e| Error::io(&dump_path, e))?;
        let ckpt = fs::read_to_string(&old_path).map_err(|e| Error::io(&old_path, e))?;
        (restore(&read_checkpoint(&ckpt)?), read_batch_dump(&text)?)
    } else {
        let (base, batch) = fresh_batch(lab)?;
        save_batch(out, &base, &batch)?;
        (base, batch)
    };
    if old.shape() != lab.shape || *batch.env() != lab.cfg.env {
        return Err(Error::config("existing batch 0 was produced with a different config"));
    }
    let mut store = SnapshotStore::new();
    store.insert(snapshot(&old, 0, "old")?)?;
    Ok((store, batch))
}
