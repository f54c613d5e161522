//! Iterative multi-batch pipeline: collect → teacher → student, repeated,
//! with the student becoming the next collector.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{SignalSpec, SignalStrategy};
use crate::env::{write_batch_dump, TokenTable};
use crate::error::{Error, Result};
use crate::harness::config::Stage1Config;
use crate::harness::store::SnapshotStore;
use crate::harness::train::{run_online, stage1_train, stage2_distill, Lab};
use crate::losses::LossKind;
use crate::metrics::{fmt_sig9, read_metrics_csv, write_metrics_csv, MetricsRow};
use crate::policy::{read_checkpoint, restore, snapshot, write_checkpoint, PolicyParams};

/// Denominator alias resolved to the first batch's student.
pub const EARLIEST_STUDENT: &str = "earliest_student";

pub fn student_tag(batch: usize) -> String {
    format!("student.b{batch}")
}

/// One row per pipeline batch: teacher and student scores and their drift
/// from the base policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch: usize,
    pub teacher_loss: LossKind,
    pub strategy: String,
    pub teacher_avg: f64,
    pub teacher_se: f64,
    pub student_avg: f64,
    pub student_se: f64,
    pub teacher_kl_to_base: f64,
    pub student_kl_to_base: f64,
    /// Student drift from this batch's collector.
    pub student_kl_to_old: f64,
    /// Gradient updates spent on this batch (teacher, student and online).
    pub updates: usize,
}

pub const REPORT_HEADER: &str = "batch,teacher_loss,strategy,teacher_avg,teacher_se,student_avg,student_se,teacher_kl_to_base,student_kl_to_base,student_kl_to_old,updates";

pub fn write_report_csv(rows: &[BatchReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let loss = toml::Value::try_from(r.teacher_loss).expect("loss kind serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.batch,
            loss.as_str().unwrap_or_default(),
            r.strategy,
            fmt_sig9(r.teacher_avg),
            fmt_sig9(r.teacher_se),
            fmt_sig9(r.student_avg),
            fmt_sig9(r.student_se),
            fmt_sig9(r.teacher_kl_to_base),
            fmt_sig9(r.student_kl_to_base),
            fmt_sig9(r.student_kl_to_old),
            r.updates
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: BatchReport,
    pub teacher: PolicyParams,
    pub student: PolicyParams,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub policy: PolicyParams,
    pub reports: Vec<BatchReport>,
    pub metrics: Vec<Vec<MetricsRow>>,
}

pub fn batch_dir(out: &Path, batch: usize) -> PathBuf {
    out.join(format!("batch_{batch}"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Signal schedule for batch `b`, with the earliest-student alias resolved.
pub fn batch_schedule(lab: &Lab, b: usize) -> Result<(Vec<SignalSpec>, Vec<usize>)> {
    let cfg = &lab.cfg;
    let (mut specs, blocks) = match cfg.pipeline.strategy_per_batch.get(b) {
        Some(text) => (vec![SignalSpec::parse_compact(text)?], vec![cfg.stage2.steps]),
        None => cfg.stage2.schedule_parts()?,
    };
    for spec in &mut specs {
        if spec.denominator == EARLIEST_STUDENT {
            spec.denominator = student_tag(0);
        }
        if spec.strategy == SignalStrategy::S3PastStudent && b == 0 {
            return Err(Error::config("a past-student signal needs a previous batch"));
        }
    }
    Ok((specs, blocks))
}

fn describe(specs: &[SignalSpec]) -> String {
    specs
        .iter()
        .map(|s| {
            let strategy = toml::Value::try_from(s.strategy).expect("strategy serializes");
            format!("{}:{}:{}", strategy.as_str().unwrap_or_default(), s.numerator, s.denominator)
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Teacher loss for batch `b`.
pub fn batch_teacher_config(lab: &Lab, b: usize) -> Result<Stage1Config> {
    let mut s1 = lab.cfg.stage1.clone();
    if let Some(kind) = lab.cfg.pipeline.loss_per_batch.get(b) {
        s1.loss.kind = kind.parse()?;
    }
    Ok(s1)
}

/// Runs one batch from `current`; `students` holds the earlier batches' students.
pub fn run_batch(
    lab: &Lab,
    b: usize,
    base: &PolicyParams,
    current: &PolicyParams,
    students: &[PolicyParams],
) -> Result<(BatchOutcome, TokenTable, String)> {
    let mut store = SnapshotStore::new();
    store.insert(snapshot(current, 0, "old")?)?;
    store.insert(snapshot(base, 0, "base")?)?;
    for (j, s) in students.iter().enumerate() {
        store.insert(snapshot(s, 0, &student_tag(j))?)?;
    }
    let batch = lab.collect(current, b as u64, "old")?;
    let dump = write_batch_dump(&batch)?;
    let table = TokenTable::from_batch(&batch, &lab.enc);
    let s1 = batch_teacher_config(lab, b)?;
    let (specs, blocks) = batch_schedule(lab, b)?;
    let teacher1 = stage1_train(lab, &s1, &table, &mut store, b as u64)?;
    let mut metrics = teacher1.metrics;
    if lab.cfg.teacher2.enabled {
        metrics.extend(stage1_train(lab, &lab.cfg.teacher2, &table, &mut store, b as u64)?.metrics);
    }
    let s2 = stage2_distill(lab, &lab.cfg.stage2, &specs, &blocks, &table, &store, b as u64)?;
    metrics.extend(s2.metrics);
    let mut student = s2.student;
    let mut updates = s1.steps + blocks.iter().sum::<usize>();
    if lab.cfg.teacher2.enabled {
        updates += lab.cfg.teacher2.steps;
    }
    if lab.cfg.pipeline.online_interleave {
        let online = run_online(lab, &student, lab.cfg.online.steps, b as u64)?;
        student = online.policy;
        metrics.extend(online.metrics);
        updates += lab.cfg.online.steps;
    }
    let teacher = store.restore("extreme")?;
    let t_eval = lab.evaluate(&teacher)?;
    let s_eval = lab.evaluate(&student)?;
    let report = BatchReport {
        batch: b,
        teacher_loss: s1.loss.kind,
        strategy: describe(&specs),
        teacher_avg: t_eval.avg,
        teacher_se: t_eval.se,
        student_avg: s_eval.avg,
        student_se: s_eval.se,
        teacher_kl_to_base: lab.reverse_kl(&teacher, base)?.mean,
        student_kl_to_base: lab.reverse_kl(&student, base)?.mean,
        student_kl_to_old: lab.reverse_kl(&student, current)?.mean,
        updates,
    };
    Ok((
        BatchOutcome {
            report,
            teacher,
            student,
            metrics,
        },
        table,
        dump,
    ))
}

fn write_batch(dir: &Path, outcome: &BatchOutcome, dump: &str) -> Result<()> {
    let b = outcome.report.batch;
    write_file(&dir.join("batch.dump"), dump)?;
    write_file(
        &dir.join("teacher.ckpt"),
        &write_checkpoint(&snapshot(&outcome.teacher, b, "extreme")?),
    )?;
    write_file(&dir.join("metrics.csv"), &write_metrics_csv(&outcome.metrics))?;
    let report = toml::to_string(&outcome.report).map_err(|e| Error::parse("batch report", e))?;
    write_file(&dir.join("report.toml"), &report)?;
    // Written last: its presence marks the batch complete.
    write_file(
        &dir.join("student.ckpt"),
        &write_checkpoint(&snapshot(&outcome.student, b, &student_tag(b))?),
    )
}

fn read_batch(dir: &Path) -> Result<Option<BatchOutcome>> {
    let student_path = dir.join("student.ckpt");
    if !student_path.is_file() {
        return Ok(None);
    }
    let report: BatchReport =
        toml::from_str(&read_file(&dir.join("report.toml"))?).map_err(|e| Error::parse("batch report", e))?;
    Ok(Some(BatchOutcome {
        report,
        teacher: restore(&read_checkpoint(&read_file(&dir.join("teacher.ckpt"))?)?),
        student: restore(&read_checkpoint(&read_file(&student_path)?)?),
        metrics: read_metrics_csv(&read_file(&dir.join("metrics.csv"))?)?,
    }))
}

/// Runs every batch. With `out`, each finished batch is written to
/// `out/batch_N/`; with `resume`, batches already on disk are loaded instead
/// of recomputed.
pub fn run_pipeline(lab: &Lab, out: Option<&Path>, resume: bool) -> Result<PipelineOutcome> {
    let base = lab.base_policy()?;
    let mut current = base.clone();
    let mut students = Vec::new();
    let mut reports = Vec::new();
    let mut metrics = Vec::new();
    for b in 0..lab.cfg.pipeline.n_batches {
        let loaded = match (out, resume) {
            (Some(dir), true) => read_batch(&batch_dir(dir, b))?,
            _ => None,
        };
        let outcome = match loaded {
            Some(o) => {
                if o.student.shape() != lab.shape {
                    return Err(Error::config(format!(
                        "checkpoint in batch_{b} does not match the configured model"
                    )));
                }
                o
            }
            None => {
                let (o, _, dump) = run_batch(lab, b, &base, &current, &students)?;
                if let Some(dir) = out {
                    write_batch(&batch_dir(dir, b), &o, &dump)?;
                }
                o
            }
        };
        current = outcome.student.clone();
        students.push(outcome.student);
        reports.push(outcome.report);
        metrics.push(outcome.metrics);
    }
    if let Some(dir) = out {
        write_file(&dir.join("report.csv"), &write_report_csv(&reports))?;
        write_file(
            &dir.join("final.ckpt"),
            &write_checkpoint(&snapshot(&current, reports.len(), "final")?),
        )?;
    }
    Ok(PipelineOutcome {
        policy: current,
        reports,
        metrics,
    })
}
