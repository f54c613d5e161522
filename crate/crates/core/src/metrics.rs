//! Drift and quality diagnostics, and the metrics CSV.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, FeatureEncoder, TokenTable, Token};
use crate::error::{Error, Result};
use crate::losses::token_log_probs;
use crate::policy::PolicyParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1,
    Stage2,
    Online,
    Eval,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Online => "online",
            Phase::Eval => "eval",
        }
    }
}

/// One logged training step. `None` fields serialize as empty CSV cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub objective: f64,
    pub reverse_kl: f64,
    pub kl_penalty: f64,
    pub entropy: f64,
    pub avg_at_k: Option<f64>,
    pub pos_prob: Option<f64>,
    pub neg_prob: Option<f64>,
    pub ratio_diag: Option<f64>,
    pub explained_var: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRow {
    pub fn new(step: usize, phase: Phase) -> Self {
        Self {
            step,
            phase,
            objective: 0.0,
            reverse_kl: 0.0,
            kl_penalty: 0.0,
            entropy: 0.0,
            avg_at_k: None,
            pos_prob: None,
            neg_prob: None,
            ratio_diag: None,
            explained_var: None,
            wall_ms: None,
        }
    }
}

pub const METRICS_HEADER: &str =
    "step,phase,objective,reverse_kl,kl_penalty,entropy,avg_at_k,pos_prob,neg_prob,ratio_diag,explained_var,wall_ms";

/// Nine significant digits.
pub fn fmt_sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(fmt_sig9).unwrap_or_default()
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.phase.as_str(),
            fmt_sig9(r.objective),
            fmt_sig9(r.reverse_kl),
            fmt_sig9(r.kl_penalty),
            fmt_sig9(r.entropy),
            opt_cell(r.avg_at_k),
            opt_cell(r.pos_prob),
            opt_cell(r.neg_prob),
            opt_cell(r.ratio_diag),
            opt_cell(r.explained_var),
            opt_cell(r.wall_ms),
        );
    }
    out
}

pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::parse("metrics csv", "unexpected header"));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|e| Error::parse("metrics csv", e)) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let c: Vec<&str> = line.split(',').collect();
            if c.len() != 12 {
                return Err(Error::parse("metrics csv", format!("row has {} cells", c.len())));
            }
            let phase = match c[1] {
                "stage1" => Phase::Stage1,
                "stage2" => Phase::Stage2,
                "online" => Phase::Online,
                "eval" => Phase::Eval,
                other => return Err(Error::parse("metrics csv", format!("phase `{other}`"))),
            };
            Ok(MetricsRow {
                step: c[0].parse().map_err(|e| Error::parse("metrics csv", e))?,
                phase,
                objective: num(c[2])?,
                reverse_kl: num(c[3])?,
                kl_penalty: num(c[4])?,
                entropy: num(c[5])?,
                avg_at_k: opt(c[6])?,
                pos_prob: opt(c[7])?,
                neg_prob: opt(c[8])?,
                ratio_diag: opt(c[9])?,
                explained_var: opt(c[10])?,
                wall_ms: opt(c[11])?,
            })
        })
        .collect()
}

/// Monte Carlo reverse KL with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub mean: f64,
    pub se: f64,
    pub n_tokens: usize,
}

/// Per-token mean of `log π_θ(a|s) − log π_ref(a|s)` over fresh rollouts of
/// the current policy (untempered), on uniformly drawn prompts.
pub fn reverse_kl_estimate<R: Rng + ?Sized>(
    policy: &PolicyParams,
    reference: &PolicyParams,
    enc: &FeatureEncoder,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<KlEstimate> {
    if n_rollouts == 0 {
        return Err(Error::config("reverse KL needs at least one rollout"));
    }
    let env = enc.env();
    let space = env.prompt_space();
    let master = rng.next_u64();
    let mut diffs = Vec::new();
    for i in 0..n_rollouts {
        let mut r = ChaCha8Rng::seed_from_u64(master);
        r.set_stream(i as u64);
        let prompt: Vec<Token> = env.prompt_at(r.random_range(0..space));
        let traj = rollout(policy, enc, &prompt, 1.0, &mut r)?;
        for (pos, (&a, &lp)) in traj.actions.iter().zip(&traj.behavior_logps).enumerate() {
            let s = enc.encode(&prompt, &traj.actions[..pos]);
            diffs.push(lp - reference.log_prob(&s, a)?);
        }
    }
    Ok(summarize(&diffs))
}

fn summarize(diffs: &[f64]) -> KlEstimate {
    let n = diffs.len();
    if n == 0 {
        return KlEstimate {
            mean: 0.0,
            se: 0.0,
            n_tokens: 0,
        };
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    KlEstimate {
        mean,
        se: (var / n as f64).sqrt(),
        n_tokens: n,
    }
}

/// Reverse KL estimate from externally drawn samples: `(log π_θ, log π_ref)` pairs.
pub fn reverse_kl_from_samples(pairs: &[(f64, f64)]) -> KlEstimate {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    summarize(&diffs)
}

/// `1 − Var(R − p) / Var(R)` with population variances; `None` when
/// `Var(R) = 0` or fewer than two points.
pub fn explained_variance(predictions: &[f64], rewards: &[f64]) -> Option<f64> {
    let n = rewards.len();
    if n < 2 || predictions.len() != n {
        return None;
    }
    let var = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
    };
    let var_r = var(&mut rewards.iter().copied());
    if var_r == 0.0 {
        return None;
    }
    let var_res = var(&mut rewards.iter().zip(predictions).map(|(r, p)| r - p));
    Some(1.0 - var_res / var_r)
}

/// Explained variance of per-token `π(a|s)` against the trajectory rewards.
pub fn batch_explained_variance(table: &TokenTable, policy: &PolicyParams) -> Result<Option<f64>> {
    let probs: Vec<f64> = token_log_probs(table, policy)?.iter().map(|l| l.exp()).collect();
    Ok(explained_variance(&probs, &table.token_rewards()))
}

/// Mean token probability on positive (R = 1) and negative (R = 0)
/// trajectories; a side with no trajectories is `None`.
pub fn pos_neg_prob_track(table: &TokenTable, policy: &PolicyParams) -> Result<(Option<f64>, Option<f64>)> {
    let logps = token_log_probs(table, policy)?;
    let rewards = table.token_rewards();
    let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (lp, r) in logps.iter().zip(&rewards) {
        if *r == 1.0 {
            ps += lp.exp();
            pn += 1;
        } else {
            ns += lp.exp();
            nn += 1;
        }
    }
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    Ok((mean(ps, pn), mean(ns, nn)))
}

/// Mean exact entropy over every visited state of the table.
pub fn batch_entropy(table: &TokenTable, policy: &PolicyParams) -> Result<f64> {
    table.check_policy(policy)?;
    if table.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = table
        .tokens()
        .iter()
        .map(|t| policy.forward(&t.state).entropy())
        .sum();
    Ok(total / table.len() as f64)
}
