//! Teacher objectives over a token table, each with its exact gradient.
//!
//! Every function returns the objective value together with the gradient of
//! that same value with respect to the flat policy parameters. GRPO, PPO,
//! SAPO, CE and positive-likelihood objectives are maximized; MSE and the KL
//! penalty are minimized (subtracted). The trainer owns the sign convention.
//!
//! All reductions run sequentially in token order, so results are bitwise
//! reproducible.

use serde::{Deserialize, Serialize};

use crate::env::TokenTable;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, ValueParams};

/// Guard added to the group standard deviation in GRPO normalization.
pub const GRPO_STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Grpo,
    Ppo,
    Sapo,
    Ce,
    Mse,
    /// Log-likelihood ascent on positive trajectories only.
    Sft,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Self::Grpo),
            "ppo" => Ok(Self::Ppo),
            "sapo" => Ok(Self::Sapo),
            "ce" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            "sft" => Ok(Self::Sft),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeAggregate {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PpoLambdaMode {
    FixedOne,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub kind: LossKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta: f64,
    pub tau_pos: f64,
    pub tau_neg: f64,
    pub ce_aggregate: CeAggregate,
    pub ppo_lambda_mode: PpoLambdaMode,
    pub kl_weight: f64,
    pub entropy_weight: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Grpo,
            eps_low: 0.2,
            eps_high: 0.28,
            beta: 0.01,
            tau_pos: 1.0,
            tau_neg: 1.05,
            ce_aggregate: CeAggregate::Sum,
            ppo_lambda_mode: PpoLambdaMode::Dynamic,
            kl_weight: 0.0,
            entropy_weight: 0.0,
        }
    }
}

impl LossSpec {
    pub fn of_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.eps_low) || !unit(self.eps_high) {
            return Err(Error::config("eps_low and eps_high must lie in (0, 1)"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("beta must be positive"));
        }
        if !(self.tau_pos > 0.0) || !(self.tau_neg > 0.0) {
            return Err(Error::config("tau_pos and tau_neg must be positive"));
        }
        if !(self.kl_weight >= 0.0) || !(self.entropy_weight >= 0.0) {
            return Err(Error::config("kl_weight and entropy_weight must be >= 0"));
        }
        Ok(())
    }
}

/// An objective value and its gradient with respect to the flat policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub objective: f64,
    pub grad: Vec<f64>,
}

fn check(table: &TokenTable, policy: &PolicyParams) -> Result<()> {
    table.check_policy(policy)?;
    if table.is_empty() {
        return Err(Error::input("empty token table"));
    }
    Ok(())
}

/// Log-probs of every table token under `policy`.
pub fn token_log_probs(table: &TokenTable, policy: &PolicyParams) -> Result<Vec<f64>> {
    table.check_policy(policy)?;
    Ok(table
        .tokens()
        .iter()
        .map(|t| policy.forward(&t.state).log_probs[t.action])
        .collect())
}

/// Shared driver for objectives of the form `mean_t f(log π(a_t|s_t))`:
/// `term(i, logp)` returns the token term and its derivative wrt `logp`.
fn per_token_objective<F>(table: &TokenTable, policy: &PolicyParams, mut term: F) -> Result<LossOutput>
where
    F: FnMut(usize, f64) -> (f64, f64),
{
    check(table, policy)?;
    let n = table.len() as f64;
    let mut grad = vec![0.0; policy.as_slice().len()];
    let mut total = 0.0;
    for (i, tok) in table.tokens().iter().enumerate() {
        let fwd = policy.forward(&tok.state);
        let (value, slope) = term(i, fwd.log_probs[tok.action]);
        total += value;
        if slope != 0.0 {
            policy.accumulate_grad_log_prob(&tok.state, &fwd, tok.action, slope / n, &mut grad);
        }
    }
    Ok(LossOutput {
        objective: total / n,
        grad,
    })
}

/// Per-trajectory group-normalized advantages `(R − mean) / (std + ε)`
/// using the population standard deviation of each group.
pub fn grpo_advantages(table: &TokenTable) -> Vec<f64> {
    let n_groups = table.num_groups();
    let mut sum = vec![0.0; n_groups];
    let mut sq = vec![0.0; n_groups];
    let mut count = vec![0usize; n_groups];
    for t in table.trajectories() {
        sum[t.group] += t.reward;
        sq[t.group] += t.reward * t.reward;
        count[t.group] += 1;
    }
    let stats: Vec<(f64, f64)> = (0..n_groups)
        .map(|g| {
            if count[g] == 0 {
                return (0.0, 0.0);
            }
            let c = count[g] as f64;
            let mean = sum[g] / c;
            let var = (sq[g] / c - mean * mean).max(0.0);
            (mean, var.sqrt())
        })
        .collect();
    table
        .trajectories()
        .iter()
        .map(|t| {
            let (mean, std) = stats[t.group];
            (t.reward - mean) / (std + GRPO_STD_EPS)
        })
        .collect()
}

/// Spreads one value per trajectory onto that trajectory's tokens.
pub fn broadcast_to_tokens(table: &TokenTable, per_traj: &[f64]) -> Vec<f64> {
    table.tokens().iter().map(|t| per_traj[t.traj]).collect()
}

/// `min(r·A, clip(r, 1−ε_low, 1+ε_high)·A)`.
pub fn clipped_surrogate_term(r: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = r.clamp(1.0 - eps_low, 1.0 + eps_high);
    (r * adv).min(clipped * adv)
}

/// Derivative of [`clipped_surrogate_term`] with respect to `log r`:
/// `r·A` where the unclipped branch is active, exactly zero in the dead zone.
pub fn clipped_surrogate_slope(r: f64, adv: f64, eps_low: f64, eps_high: f64) -> f64 {
    let dead = (adv > 0.0 && r > 1.0 + eps_high) || (adv < 0.0 && r < 1.0 - eps_low);
    if dead {
        0.0
    } else {
        r * adv
    }
}

/// Clipped surrogate with caller-provided per-token advantages and
/// `r = exp(log π − behavior_logp)`.
pub fn surrogate_loss_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    token_adv: &[f64],
    eps_low: f64,
    eps_high: f64,
) -> Result<LossOutput> {
    if token_adv.len() != table.len() {
        return Err(Error::input("advantages must align with table tokens"));
    }
    let tokens = table.tokens();
    per_token_objective(table, policy, |i, logp| {
        let r = (logp - tokens[i].behavior_logp).exp();
        let adv = token_adv[i];
        (
            clipped_surrogate_term(r, adv, eps_low, eps_high),
            clipped_surrogate_slope(r, adv, eps_low, eps_high),
        )
    })
}

pub fn grpo_loss_and_grad(table: &TokenTable, policy: &PolicyParams, spec: &LossSpec) -> Result<LossOutput> {
    let adv = broadcast_to_tokens(table, &grpo_advantages(table));
    surrogate_loss_and_grad(table, policy, &adv, spec.eps_low, spec.eps_high)
}

/// `λ = 1 / (0.05 · T)`, clamped into (0, 1].
pub fn dynamic_lambda(len: usize) -> f64 {
    (1.0 / (0.05 * len.max(1) as f64)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    Fixed(f64),
    /// Per trajectory, [`dynamic_lambda`] of its token length.
    Dynamic,
}

impl LambdaRule {
    pub fn for_length(&self, len: usize) -> f64 {
        match self {
            LambdaRule::Fixed(l) => *l,
            LambdaRule::Dynamic => dynamic_lambda(len),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeSpec {
    pub gamma: f64,
    pub lambda: LambdaRule,
    pub value_params: ValueParams,
}

impl GaeSpec {
    pub fn new(lambda: LambdaRule, value_params: ValueParams) -> Self {
        Self {
            gamma: 1.0,
            lambda,
            value_params,
        }
    }
}

/// Per-token GAE advantages. The terminal reward is the only nonzero reward
/// and the value after the last token is zero.
pub fn gae_advantages(table: &TokenTable, gae: &GaeSpec) -> Vec<f64> {
    let values: Vec<f64> = table
        .tokens()
        .iter()
        .map(|t| gae.value_params.predict(&t.state))
        .collect();
    let mut adv = vec![0.0; table.len()];
    for traj in table.trajectories() {
        let lambda = gae.lambda.for_length(traj.len);
        let mut running = 0.0;
        for pos in (0..traj.len).rev() {
            let i = traj.start + pos;
            let last = pos + 1 == traj.len;
            let reward = if last { traj.reward } else { 0.0 };
            let next_value = if last { 0.0 } else { values[i + 1] };
            let delta = reward + gae.gamma * next_value - values[i];
            running = delta + gae.gamma * lambda * running;
            adv[i] = running;
        }
    }
    adv
}

/// Discounted return from each token (λ = 1 target for the value head).
pub fn monte_carlo_returns(table: &TokenTable, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; table.len()];
    for traj in table.trajectories() {
        for pos in 0..traj.len {
            out[traj.start + pos] = gamma.powi((traj.len - 1 - pos) as i32) * traj.reward;
        }
    }
    out
}

/// Value-head regression: `mean_t (v(s_t) − G_t)²` with Monte Carlo targets.
/// Returns the loss and its gradient in [`ValueParams::flatten`] layout.
pub fn value_loss_and_grad(table: &TokenTable, value: &ValueParams, gamma: f64) -> (f64, Vec<f64>) {
    let targets = monte_carlo_returns(table, gamma);
    let n = table.len().max(1) as f64;
    let mut grad = vec![0.0; value.v_w.len() + 1];
    let mut loss = 0.0;
    for (tok, g) in table.tokens().iter().zip(&targets) {
        let err = value.predict(&tok.state) - g;
        loss += err * err;
        let c = 2.0 * err / n;
        for (gw, x) in grad.iter_mut().zip(tok.state.values()) {
            *gw += c * x;
        }
        *grad.last_mut().expect("bias slot") += c;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    pub objective: f64,
    pub grad: Vec<f64>,
    pub value_loss: f64,
    pub value_grad: Vec<f64>,
}

/// PPO clipped surrogate on GAE advantages plus the value-head loss.
pub fn ppo_loss_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    spec: &LossSpec,
    gae: &GaeSpec,
) -> Result<PpoOutput> {
    if gae.value_params.v_w.len() != policy.shape().feat {
        return Err(Error::config("value head size does not match policy features"));
    }
    let adv = gae_advantages(table, gae);
    let pol = surrogate_loss_and_grad(table, policy, &adv, spec.eps_low, spec.eps_high)?;
    let (value_loss, value_grad) = value_loss_and_grad(table, &gae.value_params, gae.gamma);
    Ok(PpoOutput {
        objective: pol.objective,
        grad: pol.grad,
        value_loss,
        value_grad,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sapo_tau(adv: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    if adv >= 0.0 {
        tau_pos
    } else {
        tau_neg
    }
}

/// Smooth gate `w(r) = 1 + (4/τ)(σ(τ(r − 1)) − ½)`, with `τ = tau_pos` for
/// non-negative advantages and `tau_neg` otherwise. `w(1) = 1`, `w'(1) = 1`.
pub fn sapo_weight(r: f64, adv: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    let tau = sapo_tau(adv, tau_pos, tau_neg);
    1.0 + (4.0 / tau) * (sigmoid(tau * (r - 1.0)) - 0.5)
}

/// `dw/dr = 4 σ(x) σ(−x)` with `x = τ(r − 1)`; written without `1 − σ` so
/// the slope stays positive far into the tails.
pub fn sapo_weight_derivative(r: f64, adv: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    let x = sapo_tau(adv, tau_pos, tau_neg) * (r - 1.0);
    4.0 * sigmoid(x) * sigmoid(-x)
}

pub fn sapo_surrogate_loss_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    token_adv: &[f64],
    tau_pos: f64,
    tau_neg: f64,
) -> Result<LossOutput> {
    if token_adv.len() != table.len() {
        return Err(Error::input("advantages must align with table tokens"));
    }
    let tokens = table.tokens();
    per_token_objective(table, policy, |i, logp| {
        let r = (logp - tokens[i].behavior_logp).exp();
        let adv = token_adv[i];
        let w = sapo_weight(r, adv, tau_pos, tau_neg);
        let dw = sapo_weight_derivative(r, adv, tau_pos, tau_neg);
        (w * adv, dw * r * adv)
    })
}

pub fn sapo_loss_and_grad(table: &TokenTable, policy: &PolicyParams, spec: &LossSpec) -> Result<LossOutput> {
    let adv = broadcast_to_tokens(table, &grpo_advantages(table));
    sapo_surrogate_loss_and_grad(table, policy, &adv, spec.tau_pos, spec.tau_neg)
}

/// Trajectory-level implicit-reward cross entropy:
/// `R(y) = β · agg_t [log π_θ − log π_ref]`,
/// objective `mean_y l·log σ(R) + (1 − l)·log(1 − σ(R))`.
pub fn ce_loss_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    reference: &PolicyParams,
    spec: &LossSpec,
) -> Result<LossOutput> {
    check(table, policy)?;
    let ref_logps = token_log_probs(table, reference)?;
    ce_with_reference_logps(table, policy, &ref_logps, spec.beta, spec.ce_aggregate)
}

/// [`ce_loss_and_grad`] with precomputed reference log-probs.
pub fn ce_with_reference_logps(
    table: &TokenTable,
    policy: &PolicyParams,
    ref_logps: &[f64],
    beta: f64,
    aggregate: CeAggregate,
) -> Result<LossOutput> {
    check(table, policy)?;
    if ref_logps.len() != table.len() {
        return Err(Error::input("reference log-probs must align with tokens"));
    }
    let n_traj = table.trajectories().len() as f64;
    let mut grad = vec![0.0; policy.as_slice().len()];
    let mut total = 0.0;
    for traj in table.trajectories() {
        let toks = &table.tokens()[traj.start..traj.start + traj.len];
        let fwds: Vec<_> = toks.iter().map(|t| policy.forward(&t.state)).collect();
        let agg_scale = match aggregate {
            CeAggregate::Sum => 1.0,
            CeAggregate::Mean => 1.0 / traj.len as f64,
        };
        let log_ratio: f64 = toks
            .iter()
            .zip(&fwds)
            .enumerate()
            .map(|(p, (t, f))| f.log_probs[t.action] - ref_logps[traj.start + p])
            .sum();
        let reward = beta * agg_scale * log_ratio;
        let l = traj.reward;
        total += -l * softplus(-reward) - (1.0 - l) * softplus(reward);
        let d_reward = (l - sigmoid(reward)) / n_traj;
        let slope = d_reward * beta * agg_scale;
        if slope != 0.0 {
            for (t, f) in toks.iter().zip(&fwds) {
                policy.accumulate_grad_log_prob(&t.state, f, t.action, slope, &mut grad);
            }
        }
    }
    Ok(LossOutput {
        objective: total / n_traj,
        grad,
    })
}

/// Mean over positive trajectories of `agg_t log π_θ(a_t|s_t)`; zero when
/// the table has no positive trajectory.
pub fn positive_likelihood_loss_and_grad(
    table: &TokenTable,
    policy: &PolicyParams,
    aggregate: CeAggregate,
) -> Result<LossOutput> {
    check(table, policy)?;
    let positives: Vec<_> = table.trajectories().iter().filter(|t| t.reward == 1.0).collect();
    let mut grad = vec![0.0; policy.as_slice().len()];
    if positives.is_empty() {
        return Ok(LossOutput { objective: 0.0, grad });
    }
    let n = positives.len() as f64;
    let mut total = 0.0;
    for traj in positives {
        let scale = match aggregate {
            CeAggregate::Sum => 1.0,
            CeAggregate::Mean => 1.0 / traj.len as f64,
        };
        for t in &table.tokens()[traj.start..traj.start + traj.len] {
            let f = policy.forward(&t.state);
            total += scale * f.log_probs[t.action];
            policy.accumulate_grad_log_prob(&t.state, &f, t.action, scale / n, &mut grad);
        }
    }
    Ok(LossOutput {
        objective: total / n,
        grad,
    })
}

/// `mean_t (π_θ(a_t|s_t) − R)²`, minimized.
pub fn mse_loss_and_grad(table: &TokenTable, policy: &PolicyParams) -> Result<LossOutput> {
    let rewards = table.token_rewards();
    per_token_objective(table, policy, |i, logp| {
        let p = logp.exp();
        let err = p - rewards[i];
        // dp/dlogp = p
        (err * err, 2.0 * err * p)
    })
}

/// Mean exact entropy over the visited states, and its gradient.
pub fn entropy_regularizer(table: &TokenTable, policy: &PolicyParams) -> Result<LossOutput> {
    check(table, policy)?;
    let n = table.len() as f64;
    let mut grad = vec![0.0; policy.as_slice().len()];
    let mut total = 0.0;
    for tok in table.tokens() {
        let fwd = policy.forward(&tok.state);
        total += fwd.entropy();
        let dz = fwd.entropy_logit_grad();
        policy.backward_into(&tok.state, &fwd, &dz, 1.0 / n, &mut grad);
    }
    Ok(LossOutput {
        objective: total / n,
        grad,
    })
}

/// k3 estimator `mean_t (r − 1 − log r)` with `r = π_θ/π_ref` at the stored
/// tokens; nonnegative, and unbiased for `KL(π_ref ‖ π_θ)` under `π_ref` samples.
pub fn kl_penalty(table: &TokenTable, policy: &PolicyParams, reference: &PolicyParams) -> Result<LossOutput> {
    let ref_logps = token_log_probs(table, reference)?;
    kl_penalty_with_reference_logps(table, policy, &ref_logps)
}

/// [`kl_penalty`] against the stored behavior log-probs.
pub fn kl_penalty_vs_behavior(table: &TokenTable, policy: &PolicyParams) -> Result<LossOutput> {
    let ref_logps: Vec<f64> = table.tokens().iter().map(|t| t.behavior_logp).collect();
    kl_penalty_with_reference_logps(table, policy, &ref_logps)
}

pub fn kl_penalty_with_reference_logps(
    table: &TokenTable,
    policy: &PolicyParams,
    ref_logps: &[f64],
) -> Result<LossOutput> {
    if ref_logps.len() != table.len() {
        return Err(Error::input("reference log-probs must align with tokens"));
    }
    per_token_objective(table, policy, |i, logp| {
        let log_r = logp - ref_logps[i];
        let r = log_r.exp();
        ((r - 1.0 - log_r).max(0.0), r - 1.0)
    })
}
