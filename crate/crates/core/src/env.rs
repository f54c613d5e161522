//! Toy token-sequence tasks with verifiable 0/1 terminal rewards.
//!
//! Each task has a single correct answer per prompt, terminated by the eos
//! token. Rollouts stop at eos or after `max_gen_len` tokens; a truncated
//! rollout simply fails the exact-match check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, StateFeatures};

pub type Token = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Answer is the prompt reversed, then eos.
    ReverseCopy,
    /// Prompt is a bit string; answer is its XOR, then eos.
    Parity,
    /// Answer is the prompt sum modulo `alphabet`, then eos.
    Modsum,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse_copy" => Ok(Self::ReverseCopy),
            "parity" => Ok(Self::Parity),
            "modsum" => Ok(Self::Modsum),
            other => Err(Error::config(format!("unknown env kind `{other}`"))),
        }
    }
}

/// Task definition. `alphabet` is the number of prompt/answer symbols
/// (`0..alphabet`); parity always uses 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub prompt_len: usize,
    pub vocab: usize,
    pub max_gen_len: usize,
    pub eos_token: Token,
    pub alphabet: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.prompt_len) {
            return Err(Error::config("env.prompt_len must be in 1..=8"));
        }
        if !(4..=32).contains(&self.vocab) {
            return Err(Error::config("env.vocab must be in 4..=32"));
        }
        if !(1..=16).contains(&self.max_gen_len) {
            return Err(Error::config("env.max_gen_len must be in 1..=16"));
        }
        if self.eos_token >= self.vocab {
            return Err(Error::config("env.eos_token must be < env.vocab"));
        }
        if self.alphabet < 2 {
            return Err(Error::config("env.alphabet must be at least 2"));
        }
        if self.kind == EnvKind::Parity && self.alphabet != 2 {
            return Err(Error::config("parity requires env.alphabet = 2"));
        }
        if self.eos_token < self.alphabet {
            return Err(Error::config(
                "env.eos_token must lie outside the symbol alphabet 0..alphabet",
            ));
        }
        if self.max_gen_len < self.answer_len() {
            return Err(Error::config(format!(
                "env.max_gen_len {} is shorter than the answer length {}",
                self.max_gen_len,
                self.answer_len()
            )));
        }
        Ok(())
    }

    /// Length of a correct answer including eos.
    pub fn answer_len(&self) -> usize {
        match self.kind {
            EnvKind::ReverseCopy => self.prompt_len + 1,
            EnvKind::Parity | EnvKind::Modsum => 2,
        }
    }

    /// Number of distinct prompts, saturating at `u64::MAX`.
    pub fn prompt_space(&self) -> u64 {
        (self.alphabet as u64)
            .checked_pow(self.prompt_len as u32)
            .unwrap_or(u64::MAX)
    }

    /// The prompt with mixed-radix index `index` (most significant symbol first).
    pub fn prompt_at(&self, mut index: u64) -> Vec<Token> {
        let base = self.alphabet as u64;
        let mut out = vec![0; self.prompt_len];
        for slot in out.iter_mut().rev() {
            *slot = (index % base) as Token;
            index /= base;
        }
        out
    }

    pub fn all_prompts(&self) -> Vec<Vec<Token>> {
        (0..self.prompt_space()).map(|i| self.prompt_at(i)).collect()
    }

    /// The unique rewarded action sequence for `prompt`, eos included.
    pub fn correct_answer(&self, prompt: &[Token]) -> Vec<Token> {
        let mut out = match self.kind {
            EnvKind::ReverseCopy => prompt.iter().rev().copied().collect(),
            EnvKind::Parity => vec![prompt.iter().fold(0, |acc, b| acc ^ (b & 1))],
            EnvKind::Modsum => vec![prompt.iter().sum::<Token>() % self.alphabet],
        };
        out.push(self.eos_token);
        out
    }
}

/// 1 iff `actions` is exactly the correct answer followed by eos.
pub fn terminal_reward(env: &EnvSpec, prompt: &[Token], actions: &[Token]) -> f64 {
    if actions == env.correct_answer(prompt).as_slice() {
        1.0
    } else {
        0.0
    }
}

/// Deterministic state encoding: one-hot per prompt position, one-hot per
/// slot of the last `context` generated tokens (zeros when absent), and the
/// prefix length divided by `max_gen_len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEncoder {
    env: EnvSpec,
    context: usize,
}

impl FeatureEncoder {
    pub fn new(env: EnvSpec, context: usize) -> Result<Self> {
        env.validate()?;
        Ok(Self { env, context })
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn feat(&self) -> usize {
        (self.env.prompt_len + self.context) * self.env.vocab + 1
    }

    pub fn encode(&self, prompt: &[Token], prefix: &[Token]) -> StateFeatures {
        let v = self.env.vocab;
        let mut x = vec![0.0; self.feat()];
        for (i, &tok) in prompt.iter().enumerate().take(self.env.prompt_len) {
            x[i * v + tok] = 1.0;
        }
        let base = self.env.prompt_len * v;
        // slot 0 holds the most recent token
        for (slot, &tok) in prefix.iter().rev().take(self.context).enumerate() {
            x[base + slot * v + tok] = 1.0;
        }
        x[self.feat() - 1] = prefix.len() as f64 / self.env.max_gen_len as f64;
        StateFeatures::new(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: Vec<Token>,
    pub actions: Vec<Token>,
    pub behavior_logps: Vec<f64>,
    pub reward: f64,
}

/// Generates one completion. Behavior log-probs are untempered.
pub fn rollout<R: Rng + ?Sized>(
    policy: &PolicyParams,
    enc: &FeatureEncoder,
    prompt: &[Token],
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    let env = enc.env();
    let mut actions = Vec::with_capacity(env.max_gen_len);
    let mut logps = Vec::with_capacity(env.max_gen_len);
    while actions.len() < env.max_gen_len {
        let s = enc.encode(prompt, &actions);
        let (a, lp) = policy.sample_token(&s, temperature, rng)?;
        actions.push(a);
        logps.push(lp);
        if a == env.eos_token {
            break;
        }
    }
    let reward = terminal_reward(env, prompt, &actions);
    Ok(Trajectory {
        prompt: prompt.to_vec(),
        actions,
        behavior_logps: logps,
        reward,
    })
}

/// Fixed rollout set grouped by prompt. Immutable after collection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    env: EnvSpec,
    prompts: Vec<Vec<Token>>,
    groups: Vec<Vec<Trajectory>>,
    collector: String,
    sampled_with_replacement: bool,
}

impl TrajectoryBatch {
    /// Assembles a batch, checking the group and trajectory invariants.
    pub fn new(
        env: EnvSpec,
        groups: Vec<Vec<Trajectory>>,
        collector: &str,
        sampled_with_replacement: bool,
    ) -> Result<Self> {
        let k = groups.first().map(Vec::len).unwrap_or(0);
        if groups.is_empty() || k == 0 {
            return Err(Error::input("batch needs at least one non-empty group"));
        }
        let mut prompts = Vec::with_capacity(groups.len());
        for g in &groups {
            if g.len() != k {
                return Err(Error::input("every group must hold the same number of trajectories"));
            }
            let prompt = &g[0].prompt;
            for t in g {
                if &t.prompt != prompt {
                    return Err(Error::input("trajectories in a group must share the prompt"));
                }
                if t.actions.is_empty() || t.actions.len() != t.behavior_logps.len() {
                    return Err(Error::input("actions and behavior_logps must align"));
                }
                if t.behavior_logps.iter().any(|l| !(*l <= 0.0)) {
                    return Err(Error::input("behavior log-probs must be <= 0"));
                }
                if t.reward != 0.0 && t.reward != 1.0 {
                    return Err(Error::input("rewards must be 0 or 1"));
                }
            }
            prompts.push(prompt.clone());
        }
        Ok(Self {
            env,
            prompts,
            groups,
            collector: collector.to_string(),
            sampled_with_replacement,
        })
    }

    pub fn env(&self) -> &EnvSpec {
        &self.env
    }

    pub fn prompts(&self) -> &[Vec<Token>] {
        &self.prompts
    }

    pub fn groups(&self) -> &[Vec<Trajectory>] {
        &self.groups
    }

    pub fn collector(&self) -> &str {
        &self.collector
    }

    /// Trajectories per group.
    pub fn k(&self) -> usize {
        self.groups[0].len()
    }

    /// Set when the prompt space was smaller than the requested prompt count.
    pub fn sampled_with_replacement(&self) -> bool {
        self.sampled_with_replacement
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.groups.iter().flatten()
    }

    pub fn num_trajectories(&self) -> usize {
        self.groups.len() * self.k()
    }

    pub fn mean_reward(&self) -> f64 {
        self.trajectories().map(|t| t.reward).sum::<f64>() / self.num_trajectories() as f64
    }
}

/// Draws `n` prompts uniformly, without replacement when the prompt space
/// allows it. The flag reports a fallback to sampling with replacement.
pub fn sample_prompts<R: Rng + ?Sized>(env: &EnvSpec, n: usize, rng: &mut R) -> (Vec<Vec<Token>>, bool) {
    let space = env.prompt_space();
    if (n as u64) <= space && space <= usize::MAX as u64 {
        let idx = rand::seq::index::sample(rng, space as usize, n);
        (idx.into_iter().map(|i| env.prompt_at(i as u64)).collect(), false)
    } else {
        let prompts = (0..n).map(|_| env.prompt_at(rng.random_range(0..space))).collect();
        (prompts, true)
    }
}

/// One independent stream per (prompt, rollout) derived from a master seed,
/// so results do not depend on evaluation order.
fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(stream);
    r
}

#[allow(clippy::too_many_arguments)]
pub fn collect_batch<R: Rng + ?Sized>(
    policy: &PolicyParams,
    enc: &FeatureEncoder,
    n_prompts: usize,
    k: usize,
    temperature: f64,
    collector: &str,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if n_prompts == 0 {
        return Err(Error::config("rollout.n_prompts must be >= 1"));
    }
    if k < 2 {
        return Err(Error::config("rollout.k must be >= 2 for group normalization"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("rollout.temperature must be positive"));
    }
    let (prompts, with_replacement) = sample_prompts(enc.env(), n_prompts, rng);
    let master = rng.next_u64();
    let mut groups = Vec::with_capacity(n_prompts);
    for (i, prompt) in prompts.iter().enumerate() {
        let mut group = Vec::with_capacity(k);
        for j in 0..k {
            let mut r = stream_rng(master, (i * k + j) as u64);
            group.push(rollout(policy, enc, prompt, temperature, &mut r)?);
        }
        groups.push(group);
    }
    TrajectoryBatch::new(*enc.env(), groups, collector, with_replacement)
}

/// AVG@K with its sampling standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub avg: f64,
    /// `sqrt(Σ_i p_i (1 − p_i) / K) / n` over per-prompt success rates `p_i`.
    pub se: f64,
}

/// Mean over prompts of the mean reward of `k` independent rollouts.
pub fn evaluate_avg_at_k<R: Rng + ?Sized>(
    policy: &PolicyParams,
    enc: &FeatureEncoder,
    prompts: &[Vec<Token>],
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<EvalResult> {
    if k == 0 {
        return Err(Error::config("eval.K must be >= 1"));
    }
    if prompts.is_empty() {
        return Err(Error::config("evaluation needs at least one prompt"));
    }
    let master = rng.next_u64();
    let mut sum = 0.0;
    let mut var = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        let mut hits = 0.0;
        for j in 0..k {
            let mut r = stream_rng(master, (i * k + j) as u64);
            hits += rollout(policy, enc, prompt, temperature, &mut r)?.reward;
        }
        let p = hits / k as f64;
        sum += p;
        var += p * (1.0 - p) / k as f64;
    }
    let n = prompts.len() as f64;
    Ok(EvalResult {
        avg: sum / n,
        se: var.sqrt() / n,
    })
}

/// One generated token with everything the losses need.
#[derive(Debug, Clone)]
pub struct TokenRecord {
    pub state: StateFeatures,
    pub action: Token,
    pub behavior_logp: f64,
    /// Trajectory index within the owning table.
    pub traj: usize,
    /// Token index within the full batch this record came from.
    pub origin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajSlice {
    pub group: usize,
    pub reward: f64,
    pub start: usize,
    pub len: usize,
}

/// Token-major view of a batch (trajectories in group order).
#[derive(Debug, Clone)]
pub struct TokenTable {
    tokens: Vec<TokenRecord>,
    trajs: Vec<TrajSlice>,
    n_groups: usize,
}

impl TokenTable {
    pub fn from_batch(batch: &TrajectoryBatch, enc: &FeatureEncoder) -> Self {
        let mut tokens = Vec::new();
        let mut trajs = Vec::new();
        for (g, group) in batch.groups().iter().enumerate() {
            for t in group {
                let ti = trajs.len();
                let start = tokens.len();
                for (pos, (&a, &lp)) in t.actions.iter().zip(&t.behavior_logps).enumerate() {
                    tokens.push(TokenRecord {
                        state: enc.encode(&t.prompt, &t.actions[..pos]),
                        action: a,
                        behavior_logp: lp,
                        traj: ti,
                        origin: tokens.len(),
                    });
                }
                trajs.push(TrajSlice {
                    group: g,
                    reward: t.reward,
                    start,
                    len: t.actions.len(),
                });
            }
        }
        Self {
            tokens,
            trajs,
            n_groups: batch.groups().len(),
        }
    }

    /// Table restricted to the given trajectories, keeping group labels and
    /// each token's `origin`.
    pub fn subset(&self, traj_ids: &[usize]) -> Self {
        let mut tokens = Vec::new();
        let mut trajs = Vec::with_capacity(traj_ids.len());
        for &id in traj_ids {
            let src = &self.trajs[id];
            let start = tokens.len();
            for tok in &self.tokens[src.start..src.start + src.len] {
                let mut t = tok.clone();
                t.traj = trajs.len();
                tokens.push(t);
            }
            trajs.push(TrajSlice {
                group: src.group,
                reward: src.reward,
                start,
                len: src.len,
            });
        }
        Self {
            tokens,
            trajs,
            n_groups: self.n_groups,
        }
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn trajectories(&self) -> &[TrajSlice] {
        &self.trajs
    }

    pub fn num_groups(&self) -> usize {
        self.n_groups
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Terminal reward of each token's trajectory.
    pub fn token_rewards(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| self.trajs[t.traj].reward).collect()
    }

    pub fn feat(&self) -> Option<usize> {
        self.tokens.first().map(|t| t.state.len())
    }

    pub fn check_policy(&self, policy: &PolicyParams) -> Result<()> {
        match self.feat() {
            Some(f) if f != policy.shape().feat => Err(Error::config(format!(
                "batch features have length {f}, policy expects {}",
                policy.shape().feat
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchDump {
    format_version: u32,
    collector: String,
    sampled_with_replacement: bool,
    k: usize,
    env: EnvSpec,
    trajectories: Vec<DumpTrajectory>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpTrajectory {
    group: usize,
    prompt: Vec<Token>,
    actions: Vec<Token>,
    behavior_logps: Vec<f64>,
    reward: f64,
}

/// Serializes a batch as a structured-text document. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_batch_dump(batch: &TrajectoryBatch) -> Result<String> {
    let dump = BatchDump {
        format_version: 1,
        collector: batch.collector.clone(),
        sampled_with_replacement: batch.sampled_with_replacement,
        k: batch.k(),
        env: batch.env,
        trajectories: batch
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, group)| {
                group.iter().map(move |t| DumpTrajectory {
                    group: g,
                    prompt: t.prompt.clone(),
                    actions: t.actions.clone(),
                    behavior_logps: t.behavior_logps.clone(),
                    reward: t.reward,
                })
            })
            .collect(),
    };
    toml::to_string(&dump).map_err(|e| Error::parse("batch dump", e))
}

pub fn read_batch_dump(text: &str) -> Result<TrajectoryBatch> {
    let dump: BatchDump = toml::from_str(text).map_err(|e| Error::parse("batch dump", e))?;
    if dump.format_version != 1 {
        return Err(Error::parse("batch dump", "unsupported format_version"));
    }
    dump.env.validate()?;
    let mut groups: Vec<Vec<Trajectory>> = Vec::new();
    for t in dump.trajectories {
        if t.group == groups.len() {
            groups.push(Vec::new());
        } else if t.group + 1 != groups.len() {
            return Err(Error::parse("batch dump", "trajectories must be listed group by group"));
        }
        groups.last_mut().expect("group exists").push(Trajectory {
            prompt: t.prompt,
            actions: t.actions,
            behavior_logps: t.behavior_logps,
            reward: t.reward,
        });
    }
    let batch = TrajectoryBatch::new(dump.env, groups, &dump.collector, dump.sampled_with_replacement)?;
    if batch.k() != dump.k {
        return Err(Error::parse("batch dump", "group size does not match k"));
    }
    Ok(batch)
}
