//! Stage-2 distillation: per-token log-ratio signals between two policy
//! snapshots, masked and whitened, substituted for the advantage in a
//! clipped surrogate anchored at the collector policy.

use serde::{Deserialize, Serialize};

use crate::env::TokenTable;
use crate::error::{Error, Result};
use crate::harness::store::SnapshotStore;
use crate::losses::{
    clipped_surrogate_slope, clipped_surrogate_term, entropy_regularizer, kl_penalty_vs_behavior,
    token_log_probs, LossOutput,
};
use crate::optim::Optimizer;
use crate::policy::PolicyParams;

/// Guard in the ratio diagnostic denominator.
pub const RATIO_DIAG_EPS: f64 = 1e-8;

/// Population standard deviations below this are treated as constant input.
pub const WHITEN_DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalStrategy {
    /// `log π_e / π_old`, frozen.
    S1FixedOld,
    /// `log π_e / π_θ`, recomputed against the live policy every step.
    S1Evolving,
    /// `log π_e / π_un`, frozen.
    S2Unlearned,
    /// `log π_teacher / π_past_student`, frozen.
    S3PastStudent,
}

impl std::str::FromStr for SignalStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1_fixed_old" => Ok(Self::S1FixedOld),
            "s1_evolving" => Ok(Self::S1Evolving),
            "s2_unlearned" => Ok(Self::S2Unlearned),
            "s3_past_student" => Ok(Self::S3PastStudent),
            other => Err(Error::config(format!("unknown signal strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    KeepNonneg,
    KeepNonpos,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "keep_nonneg" => Ok(Self::KeepNonneg),
            "keep_nonpos" => Ok(Self::KeepNonpos),
            other => Err(Error::config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalSpec {
    pub strategy: SignalStrategy,
    pub numerator: String,
    /// Ignored for [`SignalStrategy::S1Evolving`].
    pub denominator: String,
    pub mask: MaskMode,
    pub whiten: bool,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            strategy: SignalStrategy::S1FixedOld,
            numerator: "extreme".into(),
            denominator: "old".into(),
            mask: MaskMode::None,
            whiten: true,
        }
    }
}

impl SignalSpec {
    pub fn new(strategy: SignalStrategy, numerator: &str, denominator: &str) -> Self {
        Self {
            strategy,
            numerator: numerator.into(),
            denominator: denominator.into(),
            ..Self::default()
        }
    }

    /// Parses the compact form `strategy:numerator:denominator[:mask]`.
    pub fn parse_compact(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if !(3..=4).contains(&parts.len()) {
            return Err(Error::config(format!(
                "signal `{text}` must look like strategy:numerator:denominator[:mask]"
            )));
        }
        Ok(Self {
            strategy: parts[0].parse()?,
            numerator: parts[1].into(),
            denominator: parts[2].into(),
            mask: parts.get(3).map(|m| m.parse()).transpose()?.unwrap_or(MaskMode::None),
            whiten: true,
        })
    }

    pub fn uses_denominator(&self) -> bool {
        self.strategy != SignalStrategy::S1Evolving
    }

    /// Tags that must be present in the store.
    pub fn required_tags(&self) -> Vec<&str> {
        let mut tags = vec![self.numerator.as_str()];
        if self.uses_denominator() {
            tags.push(self.denominator.as_str());
        }
        tags
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalStats {
    pub raw_mean: f64,
    pub raw_std: f64,
    pub masked_fraction: f64,
}

/// Per-token advantage substitute aligned with a token table.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSignal {
    pub values: Vec<f64>,
    pub raw: Vec<f64>,
    pub masked: Vec<f64>,
    pub spec: SignalSpec,
    pub stats: SignalStats,
}

impl TokenSignal {
    /// Evolving signals are rebuilt against the live policy every step.
    pub fn recompute_per_step(&self) -> bool {
        self.spec.strategy == SignalStrategy::S1Evolving
    }

    /// Columnar dump: token index, raw, masked and final values.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("token,raw,masked,whitened\n");
        for i in 0..self.values.len() {
            out.push_str(&format!(
                "{i},{:.16e},{:.16e},{:.16e}\n",
                self.raw[i], self.masked[i], self.values[i]
            ));
        }
        out
    }
}

/// `log π_num(a_t|s_t) − log π_den(a_t|s_t)` at every table token.
pub fn raw_log_ratio(table: &TokenTable, numerator: &PolicyParams, denominator: &PolicyParams) -> Result<Vec<f64>> {
    let num = token_log_probs(table, numerator)?;
    let den = token_log_probs(table, denominator)?;
    Ok(num.iter().zip(&den).map(|(n, d)| n - d).collect())
}

/// Element-wise clipping; returns the masked values and the fraction of
/// entries the mask changed to zero.
pub fn mask_signal(values: &[f64], mask: MaskMode) -> (Vec<f64>, f64) {
    let out: Vec<f64> = values
        .iter()
        .map(|&v| match mask {
            MaskMode::None => v,
            MaskMode::KeepNonneg => v.max(0.0),
            MaskMode::KeepNonpos => v.min(0.0),
        })
        .collect();
    let zeroed = values.iter().zip(&out).filter(|(a, b)| *a != *b).count();
    let frac = if values.is_empty() {
        0.0
    } else {
        zeroed as f64 / values.len() as f64
    };
    (out, frac)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Batch-global affine normalization to zero mean and unit population std.
/// Inputs with one element or (numerically) constant values map to zeros.
pub fn whiten(values: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(values);
    if values.len() <= 1 || std <= WHITEN_DEGENERATE_STD * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    let centered: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();
    // second centering pass removes the rounding residue of the first mean
    let (m2, _) = mean_std(&centered);
    centered.iter().map(|v| v - m2).collect()
}

fn finish_signal(raw: Vec<f64>, spec: &SignalSpec) -> TokenSignal {
    let (raw_mean, raw_std) = mean_std(&raw);
    let (masked, masked_fraction) = mask_signal(&raw, spec.mask);
    let values = if spec.whiten { whiten(&masked) } else { masked.clone() };
    TokenSignal {
        values,
        raw,
        masked,
        spec: spec.clone(),
        stats: SignalStats {
            raw_mean,
            raw_std,
            masked_fraction,
        },
    }
}

/// Builds the signal from stored snapshots: log-ratio, then mask, then
/// whitening. An evolving signal starts from `live` as its denominator.
pub fn build_signal(
    table: &TokenTable,
    spec: &SignalSpec,
    store: &SnapshotStore,
    live: &PolicyParams,
) -> Result<TokenSignal> {
    let num = store.get(&spec.numerator)?.params();
    let raw = if spec.uses_denominator() {
        raw_log_ratio(table, num, store.get(&spec.denominator)?.params())?
    } else {
        raw_log_ratio(table, num, live)?
    };
    Ok(finish_signal(raw, spec))
}

/// Rebuilds an evolving signal against the current policy.
pub fn refresh_signal(
    signal: &TokenSignal,
    table: &TokenTable,
    numerator: &PolicyParams,
    live: &PolicyParams,
) -> Result<TokenSignal> {
    let raw = raw_log_ratio(table, numerator, live)?;
    Ok(finish_signal(raw, &signal.spec))
}

/// Hyperparameters of one distillation update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillStepConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_weight: f64,
    pub entropy_weight: f64,
}

/// Scalars reported by a distillation update, all at the pre-update policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillStepStats {
    /// Full objective: surrogate − kl_weight·kl + entropy_weight·entropy.
    pub objective: f64,
    pub surrogate: f64,
    pub kl_penalty: f64,
    pub entropy: f64,
}

/// Distillation objective and gradient with `r = π_θ / π_old` from the
/// stored behavior log-probs and `signal` aligned with `table` tokens.
pub fn distill_objective_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    signal: &[f64],
    cfg: &DistillStepConfig,
) -> Result<(LossOutput, DistillStepStats)> {
    table.check_policy(policy)?;
    if signal.len() != table.len() {
        return Err(Error::input("signal must align with table tokens"));
    }
    if table.is_empty() {
        return Err(Error::input("empty token table"));
    }
    let n = table.len() as f64;
    let mut grad = vec![0.0; policy.as_slice().len()];
    let mut surrogate = 0.0;
    for (tok, &adv) in table.tokens().iter().zip(signal) {
        let fwd = policy.forward(&tok.state);
        let r = (fwd.log_probs[tok.action] - tok.behavior_logp).exp();
        surrogate += clipped_surrogate_term(r, adv, cfg.eps_low, cfg.eps_high);
        let slope = clipped_surrogate_slope(r, adv, cfg.eps_low, cfg.eps_high);
        if slope != 0.0 {
            policy.accumulate_grad_log_prob(&tok.state, &fwd, tok.action, slope / n, &mut grad);
        }
    }
    surrogate /= n;
    let mut objective = surrogate;
    let kl = kl_penalty_vs_behavior(table, policy)?;
    let ent = entropy_regularizer(table, policy)?;
    if cfg.kl_weight != 0.0 {
        objective -= cfg.kl_weight * kl.objective;
        for (g, k) in grad.iter_mut().zip(&kl.grad) {
            *g -= cfg.kl_weight * k;
        }
    }
    if cfg.entropy_weight != 0.0 {
        objective += cfg.entropy_weight * ent.objective;
        for (g, e) in grad.iter_mut().zip(&ent.grad) {
            *g += cfg.entropy_weight * e;
        }
    }
    let stats = DistillStepStats {
        objective,
        surrogate,
        kl_penalty: kl.objective,
        entropy: ent.objective,
    };
    Ok((LossOutput { objective, grad }, stats))
}

/// One ascent step of the distillation objective. Mutates `policy` in place.
pub fn distill_step(
    policy: &mut PolicyParams,
    table: &TokenTable,
    signal: &[f64],
    cfg: &DistillStepConfig,
    opt: &mut Optimizer,
) -> Result<DistillStepStats> {
    let (out, stats) = distill_objective_and_grad(table, policy, signal, cfg)?;
    opt.step(policy.as_mut_slice(), &out.grad);
    Ok(stats)
}

/// Block-sequential assignment of distillation steps to signals.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSchedule {
    specs: Vec<SignalSpec>,
    bounds: Vec<usize>,
}

impl EnsembleSchedule {
    pub fn spec_index(&self, step: usize) -> Option<usize> {
        self.bounds.iter().position(|&end| step < end)
    }

    pub fn spec_for(&self, step: usize) -> Option<&SignalSpec> {
        self.spec_index(step).map(|i| &self.specs[i])
    }

    pub fn total_steps(&self) -> usize {
        self.bounds.last().copied().unwrap_or(0)
    }

    pub fn specs(&self) -> &[SignalSpec] {
        &self.specs
    }
}

pub fn ensemble_schedule(specs: &[SignalSpec], block_steps: &[usize]) -> Result<EnsembleSchedule> {
    if specs.len() != block_steps.len() {
        return Err(Error::config(format!(
            "ensemble has {} signals but {} block lengths",
            specs.len(),
            block_steps.len()
        )));
    }
    if specs.is_empty() {
        return Err(Error::config("ensemble needs at least one signal"));
    }
    if block_steps.iter().any(|&b| b == 0) {
        return Err(Error::config("ensemble block lengths must be positive"));
    }
    let mut bounds = Vec::with_capacity(block_steps.len());
    let mut acc = 0;
    for b in block_steps {
        acc += b;
        bounds.push(acc);
    }
    Ok(EnsembleSchedule {
        specs: specs.to_vec(),
        bounds,
    })
}

/// `mean_t |log π_s − log π_old| / (|log π_t − log π_old| + ε)`.
pub fn ratio_diagnostic(
    table: &TokenTable,
    student: &PolicyParams,
    teacher: &PolicyParams,
    old: &PolicyParams,
) -> Result<f64> {
    let s = token_log_probs(table, student)?;
    let t = token_log_probs(table, teacher)?;
    let o = token_log_probs(table, old)?;
    if s.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = s
        .iter()
        .zip(&t)
        .zip(&o)
        .map(|((s, t), o)| (s - o).abs() / ((t - o).abs() + RATIO_DIAG_EPS))
        .sum();
    Ok(total / s.len() as f64)
}
