//! Stage-1 teacher training, stage-2 distillation and the on-policy baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    build_signal, distill_objective_and_grad, distill_step, ensemble_schedule, ratio_diagnostic,
    refresh_signal, DistillStepConfig, SignalSpec, TokenSignal,
};
use crate::env::{
    collect_batch, evaluate_avg_at_k, sample_prompts, EvalResult, FeatureEncoder, Token, TokenTable,
    Trajectory, TrajectoryBatch,
};
use crate::error::{Error, Result};
use crate::harness::config::{ExtremeSelect, RunConfig, Stage1Config, Stage2Config};
use crate::harness::store::SnapshotStore;
use crate::losses::{
    broadcast_to_tokens, ce_with_reference_logps, entropy_regularizer, gae_advantages,
    grpo_advantages, grpo_loss_and_grad, kl_penalty_vs_behavior, mse_loss_and_grad,
    positive_likelihood_loss_and_grad, sapo_surrogate_loss_and_grad, surrogate_loss_and_grad,
    token_log_probs, value_loss_and_grad, CeAggregate, GaeSpec, LambdaRule, LossKind, LossOutput,
    LossSpec, PpoLambdaMode,
};
use crate::metrics::{
    batch_entropy, batch_explained_variance, pos_neg_prob_track, reverse_kl_estimate, KlEstimate,
    MetricsRow, Phase,
};
use crate::optim::Optimizer;
use crate::policy::{snapshot, PolicyParams, PolicyShape, ValueParams};

/// Shared run context: config, state encoder and held-out evaluation prompts.
#[derive(Debug, Clone)]
pub struct Lab {
    pub cfg: RunConfig,
    pub enc: FeatureEncoder,
    pub shape: PolicyShape,
    pub eval_prompts: Vec<Vec<Token>>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for a named random stream; stable across platforms and releases.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

impl Lab {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let enc = cfg.encoder()?;
        let shape = cfg.policy_shape()?;
        let env = cfg.env;
        let n = cfg.eval.n_eval_prompts;
        let eval_prompts = if n == 0 || n as u64 >= env.prompt_space() {
            env.all_prompts()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "eval_prompts", 0));
            sample_prompts(&env, n, &mut rng).0
        };
        Ok(Self {
            cfg,
            enc,
            shape,
            eval_prompts,
        })
    }

    pub fn rng(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, label, index))
    }

    /// Random init followed by `base.warmup_steps` of likelihood ascent on
    /// correct answers.
    pub fn base_policy(&self) -> Result<PolicyParams> {
        let mut rng = self.rng("init", 0);
        let mut policy = PolicyParams::random(self.shape, self.cfg.model.init_scale, &mut rng);
        let warm = &self.cfg.base;
        if warm.warmup_steps == 0 {
            return Ok(policy);
        }
        let env = self.cfg.env;
        let mut opt = Optimizer::adam(warm.warmup_lr);
        for step in 0..warm.warmup_steps {
            let prompts = if warm.warmup_prompts == 0 {
                env.all_prompts()
            } else {
                let mut r = self.rng("warmup", step as u64);
                sample_prompts(&env, warm.warmup_prompts, &mut r).0
            };
            let table = demonstration_table(&self.enc, &prompts, &policy)?;
            let out = positive_likelihood_loss_and_grad(&table, &policy, CeAggregate::Mean)?;
            opt.step(policy.as_mut_slice(), &out.grad);
        }
        Ok(policy)
    }

    /// AVG@K on the held-out prompts with a fixed sampling stream, so that
    /// evaluations of different policies share random numbers.
    pub fn evaluate(&self, policy: &PolicyParams) -> Result<EvalResult> {
        let mut rng = self.rng("eval", 0);
        evaluate_avg_at_k(
            policy,
            &self.enc,
            &self.eval_prompts,
            self.cfg.eval.k,
            self.cfg.eval.temperature,
            &mut rng,
        )
    }

    /// Reverse KL of `policy` from `reference` on a fixed sampling stream.
    pub fn reverse_kl(&self, policy: &PolicyParams, reference: &PolicyParams) -> Result<KlEstimate> {
        let mut rng = self.rng("kl", 0);
        reverse_kl_estimate(policy, reference, &self.enc, self.cfg.eval.kl_rollouts, &mut rng)
    }

    /// Fresh rollout batch for pipeline batch `index`.
    pub fn collect(&self, policy: &PolicyParams, index: u64, collector: &str) -> Result<TrajectoryBatch> {
        let r = &self.cfg.rollout;
        let mut rng = self.rng("batch", index);
        collect_batch(policy, &self.enc, r.n_prompts, r.k, r.temperature, collector, &mut rng)
    }
}

/// One correct completion per prompt, with log-probs under `policy`.
pub fn demonstration_table(
    enc: &FeatureEncoder,
    prompts: &[Vec<Token>],
    policy: &PolicyParams,
) -> Result<TokenTable> {
    let env = enc.env();
    let mut groups = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let actions = env.correct_answer(prompt);
        let mut logps = Vec::with_capacity(actions.len());
        for pos in 0..actions.len() {
            let s = enc.encode(prompt, &actions[..pos]);
            logps.push(policy.log_prob(&s, actions[pos])?.min(0.0));
        }
        groups.push(vec![Trajectory {
            prompt: prompt.clone(),
            actions,
            behavior_logps: logps,
            reward: 1.0,
        }]);
    }
    let batch = TrajectoryBatch::new(*env, groups, "demo", false)?;
    Ok(TokenTable::from_batch(&batch, enc))
}

fn divergence(step: usize, what: &str) -> Error {
    Error::Divergence {
        step,
        detail: format!("non-finite {what}"),
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Cycles through shuffled trajectory indices, reshuffling at each epoch.
struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
            size: size.min(n),
            rng,
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.size == self.order.len() {
            return self.order.clone();
        }
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let mut ids = self.order[self.cursor..self.cursor + self.size].to_vec();
        ids.sort_unstable();
        self.cursor += self.size;
        ids
    }
}

fn gather(values: &[f64], table: &TokenTable) -> Vec<f64> {
    table.tokens().iter().map(|t| values[t.origin]).collect()
}

/// Per-run state of a stage-1 loss.
struct TeacherObjective {
    spec: LossSpec,
    /// Per-token GRPO advantages over the full batch.
    token_adv: Vec<f64>,
    /// Per-token log-probs of the collector (CE reference).
    ref_logps: Vec<f64>,
    value: ValueParams,
    value_opt: Optimizer,
}

impl TeacherObjective {
    fn new(full: &TokenTable, old: &PolicyParams, spec: LossSpec, value_lr: f64) -> Result<Self> {
        Ok(Self {
            spec,
            token_adv: broadcast_to_tokens(full, &grpo_advantages(full)),
            ref_logps: token_log_probs(full, old)?,
            value: ValueParams::zeros(old.shape().feat),
            value_opt: Optimizer::sgd(value_lr),
        })
    }

    fn gae(&self) -> GaeSpec {
        let lambda = match self.spec.ppo_lambda_mode {
            PpoLambdaMode::FixedOne => LambdaRule::Fixed(1.0),
            PpoLambdaMode::Dynamic => LambdaRule::Dynamic,
        };
        GaeSpec::new(lambda, self.value.clone())
    }

    /// Regresses the value head toward the Monte Carlo returns of `table`.
    fn fit_value(&mut self, table: &TokenTable) {
        let (_, grad) = value_loss_and_grad(table, &self.value, 1.0);
        let mut flat = self.value.flatten();
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        self.value_opt.step(&mut flat, &neg);
        self.value = ValueParams::from_flat(&flat);
    }

    /// Objective of `kind` on `sub` in ascent form, before regularizers,
    /// alongside the loss value as reported in metrics.
    fn evaluate(&self, kind: LossKind, sub: &TokenTable, policy: &PolicyParams) -> Result<(f64, LossOutput)> {
        let s = &self.spec;
        let out = match kind {
            LossKind::Grpo => {
                surrogate_loss_and_grad(sub, policy, &gather(&self.token_adv, sub), s.eps_low, s.eps_high)?
            }
            LossKind::Sapo => {
                sapo_surrogate_loss_and_grad(sub, policy, &gather(&self.token_adv, sub), s.tau_pos, s.tau_neg)?
            }
            LossKind::Ppo => {
                let adv = gae_advantages(sub, &self.gae());
                surrogate_loss_and_grad(sub, policy, &adv, s.eps_low, s.eps_high)?
            }
            LossKind::Ce => ce_with_reference_logps(sub, policy, &gather(&self.ref_logps, sub), s.beta, s.ce_aggregate)?,
            LossKind::Sft => positive_likelihood_loss_and_grad(sub, policy, s.ce_aggregate)?,
            LossKind::Mse => {
                let out = mse_loss_and_grad(sub, policy)?;
                let reported = out.objective;
                return Ok((
                    reported,
                    LossOutput {
                        objective: -out.objective,
                        grad: out.grad.iter().map(|g| -g).collect(),
                    },
                ));
            }
        };
        Ok((out.objective, out))
    }

    /// Ascent direction including the KL and entropy terms.
    fn ascent(&self, kind: LossKind, sub: &TokenTable, policy: &PolicyParams) -> Result<(f64, Vec<f64>)> {
        let (reported, mut out) = self.evaluate(kind, sub, policy)?;
        if self.spec.kl_weight != 0.0 {
            let kl = kl_penalty_vs_behavior(sub, policy)?;
            for (g, k) in out.grad.iter_mut().zip(&kl.grad) {
                *g -= self.spec.kl_weight * k;
            }
        }
        if self.spec.entropy_weight != 0.0 {
            let ent = entropy_regularizer(sub, policy)?;
            for (g, e) in out.grad.iter_mut().zip(&ent.grad) {
                *g += self.spec.entropy_weight * e;
            }
        }
        Ok((reported, out.grad))
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub metrics: Vec<MetricsRow>,
    /// Step whose params were stored as the extreme snapshot.
    pub extreme_step: usize,
    pub value: ValueParams,
}

fn fill_drift_metrics(
    lab: &Lab,
    row: &mut MetricsRow,
    table: &TokenTable,
    policy: &PolicyParams,
    old: &PolicyParams,
) -> Result<()> {
    row.reverse_kl = lab.reverse_kl(policy, old)?.mean;
    row.kl_penalty = kl_penalty_vs_behavior(table, policy)?.objective;
    row.entropy = batch_entropy(table, policy)?;
    let (pos, neg) = pos_neg_prob_track(table, policy)?;
    row.pos_prob = pos;
    row.neg_prob = neg;
    Ok(())
}

fn is_eval_step(step: usize, last: usize, every: usize) -> bool {
    step == 0 || step == last || (every > 0 && step % every == 0)
}

/// Trains a teacher on the fixed batch in `table`, starting from the store's
/// "old" snapshot. Stores `<prefix>unlearned` (if captured), `<prefix>extreme`
/// and periodic history snapshots.
pub fn stage1_train(
    lab: &Lab,
    s1: &Stage1Config,
    table: &TokenTable,
    store: &mut SnapshotStore,
    rng_index: u64,
) -> Result<Stage1Outcome> {
    let old = store.restore("old")?;
    table.check_policy(&old)?;
    if table.is_empty() {
        return Err(Error::input("stage 1 needs a nonempty batch"));
    }
    let mut policy = old.clone();
    let mut obj = TeacherObjective::new(table, &old, s1.loss, s1.value_lr)?;
    if s1.loss.kind == LossKind::Ppo || (s1.switch_step > 0 && s1.recovery_loss == LossKind::Ppo) {
        for _ in 0..s1.value_pretrain_steps {
            obj.fit_value(table);
        }
    }
    let mut opt = Optimizer::new(s1.optimizer, s1.lr);
    let mut sampler = MinibatchSampler::new(
        table.trajectories().len(),
        s1.minibatch,
        lab.rng(&format!("{}minibatch", s1.tag_prefix), rng_index),
    );
    let timing = lab.cfg.output.record_wall_ms;
    let validate = s1.extreme_select == ExtremeSelect::BestValidation;
    let mut best: Option<(f64, usize, PolicyParams)> = None;
    let mut metrics = Vec::with_capacity(s1.steps + 1);

    let kind_at = |step: usize| {
        if s1.switch_step > 0 && step > s1.switch_step {
            s1.recovery_loss
        } else {
            s1.loss.kind
        }
    };

    let log_row = |step: usize, policy: &PolicyParams, obj: &TeacherObjective, started: Option<Instant>| -> Result<MetricsRow> {
        let mut row = MetricsRow::new(step, Phase::Stage1);
        let (reported, _) = obj.evaluate(kind_at(step.max(1)), table, policy)?;
        if !reported.is_finite() {
            return Err(divergence(step, "objective"));
        }
        row.objective = reported;
        fill_drift_metrics(lab, &mut row, table, policy, &old)?;
        row.explained_var = batch_explained_variance(table, policy)?;
        if is_eval_step(step, s1.steps, s1.eval_every) {
            row.avg_at_k = Some(lab.evaluate(policy)?.avg);
        }
        row.wall_ms = started.map(ms_since);
        Ok(row)
    };

    store.push_history(snapshot(&policy, 0, &s1.tag("step_0"))?)?;
    metrics.push(log_row(0, &policy, &obj, timing.then(Instant::now))?);

    for step in 1..=s1.steps {
        let started = timing.then(Instant::now);
        let ids = sampler.next();
        let sub = table.subset(&ids);
        let kind = kind_at(step);
        let (value, grad) = obj.ascent(kind, &sub, &policy)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(divergence(step, "objective"));
        }
        opt.step(policy.as_mut_slice(), &grad);
        if !policy.is_finite() {
            return Err(divergence(step, "parameters"));
        }
        if kind == LossKind::Ppo {
            obj.fit_value(&sub);
        }
        if step == s1.unlearn_capture_step {
            store.insert(snapshot(&policy, step, &s1.tag("unlearned"))?)?;
        }
        if s1.snapshot_every > 0 && step % s1.snapshot_every == 0 {
            store.push_history(snapshot(&policy, step, &s1.tag(&format!("step_{step}")))?)?;
        }
        if validate && (step == s1.steps || (s1.validate_every > 0 && step % s1.validate_every == 0)) {
            let score = lab.evaluate(&policy)?.avg;
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, step, policy.clone()));
            }
        }
        metrics.push(log_row(step, &policy, &obj, started)?);
    }

    let (extreme_step, extreme) = match best {
        Some((_, step, params)) => (step, params),
        None => (s1.steps, policy),
    };
    store.insert(snapshot(&extreme, extreme_step, &s1.tag("extreme"))?)?;
    Ok(Stage1Outcome {
        metrics,
        extreme_step,
        value: obj.value,
    })
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub student: PolicyParams,
    pub metrics: Vec<MetricsRow>,
    /// Signals as first built, one per schedule entry.
    pub signals: Vec<TokenSignal>,
}

/// Distills a student from the store's "old" snapshot using `specs` run for
/// `blocks[i]` steps each.
pub fn stage2_distill(
    lab: &Lab,
    s2: &Stage2Config,
    specs: &[SignalSpec],
    blocks: &[usize],
    table: &TokenTable,
    store: &SnapshotStore,
    rng_index: u64,
) -> Result<Stage2Outcome> {
    store.require(["old"])?;
    for spec in specs {
        store.require(spec.required_tags())?;
    }
    let schedule = ensemble_schedule(specs, blocks)?;
    let old = store.restore("old")?;
    table.check_policy(&old)?;
    let mut student = old.clone();
    let signals = specs
        .iter()
        .map(|spec| build_signal(table, spec, store, &student))
        .collect::<Result<Vec<_>>>()?;
    let mut live = signals.clone();
    let numerators = specs
        .iter()
        .map(|spec| store.restore(&spec.numerator))
        .collect::<Result<Vec<_>>>()?;
    let step_cfg = DistillStepConfig {
        eps_low: s2.eps_low,
        eps_high: s2.eps_high,
        kl_weight: s2.kl_weight,
        entropy_weight: s2.entropy_weight,
    };
    let mut opt = Optimizer::new(s2.optimizer, s2.lr);
    let n_traj = table.trajectories().len();
    let mb = if s2.minibatch == 0 { n_traj } else { s2.minibatch };
    let mut sampler = MinibatchSampler::new(n_traj, mb, lab.rng("stage2_minibatch", rng_index));
    let timing = lab.cfg.output.record_wall_ms;
    let total = schedule.total_steps();

    let log_row = |step: usize, student: &PolicyParams, idx: usize, signal: &[f64], started: Option<Instant>| -> Result<MetricsRow> {
        let mut row = MetricsRow::new(step, Phase::Stage2);
        let (_, stats) = distill_objective_and_grad(table, student, signal, &step_cfg)?;
        if !stats.objective.is_finite() {
            return Err(divergence(step, "objective"));
        }
        row.objective = stats.objective;
        fill_drift_metrics(lab, &mut row, table, student, &old)?;
        row.ratio_diag = Some(ratio_diagnostic(table, student, &numerators[idx], &old)?);
        if is_eval_step(step, total, s2.eval_every) {
            row.avg_at_k = Some(lab.evaluate(student)?.avg);
        }
        row.wall_ms = started.map(ms_since);
        Ok(row)
    };

    let mut metrics = Vec::with_capacity(total + 1);
    metrics.push(log_row(0, &student, 0, &live[0].values, timing.then(Instant::now))?);
    for step in 0..total {
        let started = timing.then(Instant::now);
        let idx = schedule.spec_index(step).expect("step within schedule");
        if live[idx].recompute_per_step() {
            live[idx] = refresh_signal(&live[idx], table, &numerators[idx], &student)?;
        }
        let ids = sampler.next();
        let sub = table.subset(&ids);
        let sub_signal = gather(&live[idx].values, &sub);
        let stats = distill_step(&mut student, &sub, &sub_signal, &step_cfg, &mut opt)?;
        if !stats.objective.is_finite() {
            return Err(divergence(step + 1, "objective"));
        }
        if !student.is_finite() {
            return Err(divergence(step + 1, "parameters"));
        }
        metrics.push(log_row(step + 1, &student, idx, &live[idx].values, started)?);
    }
    Ok(Stage2Outcome {
        student,
        metrics,
        signals,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineOutcome {
    pub policy: PolicyParams,
    pub metrics: Vec<MetricsRow>,
}

/// On-policy GRPO: each iteration collects a small fresh batch with the
/// current policy and applies one update. `stream` separates the random
/// streams of repeated calls within one run.
pub fn run_online(lab: &Lab, start: &PolicyParams, steps: usize, stream: u64) -> Result<OnlineOutcome> {
    let on = &lab.cfg.online;
    let spec = LossSpec {
        kind: LossKind::Grpo,
        ..lab.cfg.stage1.loss
    };
    let mut policy = start.clone();
    let mut opt = Optimizer::new(on.optimizer, on.lr);
    let timing = lab.cfg.output.record_wall_ms;
    let mut metrics = Vec::with_capacity(steps);
    for step in 1..=steps {
        let started = timing.then(Instant::now);
        let mut rng = lab.rng("online", stream.wrapping_mul(1 << 32).wrapping_add(step as u64));
        let batch = collect_batch(
            &policy,
            &lab.enc,
            on.n_prompts,
            on.k,
            lab.cfg.rollout.temperature,
            "online",
            &mut rng,
        )?;
        let table = TokenTable::from_batch(&batch, &lab.enc);
        let out = grpo_loss_and_grad(&table, &policy, &spec)?;
        if !out.objective.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(divergence(step, "objective"));
        }
        let mut row = MetricsRow::new(step, Phase::Online);
        row.objective = out.objective;
        opt.step(policy.as_mut_slice(), &out.grad);
        if !policy.is_finite() {
            return Err(divergence(step, "parameters"));
        }
        row.reverse_kl = lab.reverse_kl(&policy, start)?.mean;
        row.kl_penalty = kl_penalty_vs_behavior(&table, &policy)?.objective;
        row.entropy = batch_entropy(&table, &policy)?;
        let (pos, neg) = pos_neg_prob_track(&table, &policy)?;
        row.pos_prob = pos;
        row.neg_prob = neg;
        if is_eval_step(step, steps, on.eval_every) {
            row.avg_at_k = Some(lab.evaluate(&policy)?.avg);
        }
        row.wall_ms = started.map(ms_since);
        metrics.push(row);
    }
    Ok(OnlineOutcome { policy, metrics })
}

/// Step and value of the smallest logged `pos_prob`.
pub fn pos_prob_minimum(metrics: &[MetricsRow]) -> Option<(usize, f64)> {
    metrics
        .iter()
        .filter_map(|r| r.pos_prob.map(|p| (r.step, p)))
        .fold(None, |acc, (s, p)| match acc {
            Some((_, best)) if best <= p => acc,
            _ => Some((s, p)),
        })
}

/// Runs stage 1 once per learning rate and reports where `pos_prob` bottoms
/// out, to pick `stage1.unlearn_capture_step` for a given rate.
pub fn sweep_unlearn_capture(
    lab: &Lab,
    s1: &Stage1Config,
    table: &TokenTable,
    old: &PolicyParams,
    lrs: &[f64],
) -> Result<Vec<(f64, Option<(usize, f64)>)>> {
    lrs.iter()
        .map(|&lr| {
            let mut store = SnapshotStore::new();
            store.insert(snapshot(old, 0, "old")?)?;
            let cfg = Stage1Config {
                lr,
                unlearn_capture_step: 0,
                extreme_select: ExtremeSelect::Final,
                ..s1.clone()
            };
            let out = stage1_train(lab, &cfg, table, &mut store, 0)?;
            Ok((lr, pos_prob_minimum(&out.metrics)))
        })
        .collect()
}
