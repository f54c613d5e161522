//! Run configuration.
//!
//! Config files are flat `dotted.key = value` documents (TOML syntax); every
//! key must name a field of [`RunConfig`]. Command-line overrides use the
//! same keys (`stage2.steps=16`). Bare words on the right-hand side of an
//! override are read as strings.

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::distill::{SignalSpec, SignalStrategy};
use crate::env::{EnvKind, EnvSpec, FeatureEncoder};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::optim::OptimizerKind;
use crate::policy::PolicyShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub base: BaseConfig,
    pub rollout: RolloutConfig,
    pub stage1: Stage1Config,
    /// Optional second teacher trained on the same batch, stored under
    /// `tag_prefix` (for ensembles).
    pub teacher2: Stage1Config,
    pub stage2: Stage2Config,
    pub pipeline: PipelineConfig,
    pub online: OnlineConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::ReverseCopy,
            prompt_len: 3,
            vocab: 6,
            max_gen_len: 5,
            eos_token: 5,
            alphabet: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature size; 0 derives it from the env and `context`.
    pub feat: usize,
    pub hidden: usize,
    /// Must equal `env.vocab`; 0 copies it.
    pub vocab: usize,
    /// Number of most recent generated tokens in the state encoding.
    pub context: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat: 0,
            hidden: 32,
            vocab: 0,
            context: 2,
            init_scale: 0.3,
        }
    }
}

/// Construction of the starting policy: random init followed by a short
/// supervised warm-up on correct answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseConfig {
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Prompts per warm-up step; 0 uses the whole prompt space.
    pub warmup_prompts: usize,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 0,
            warmup_lr: 0.02,
            warmup_prompts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub n_prompts: usize,
    pub k: usize,
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_prompts: 16,
            k: 8,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremeSelect {
    Final,
    BestValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Only read for `teacher2`; stage 1 always runs.
    pub enabled: bool,
    pub tag_prefix: String,
    pub loss: LossSpec,
    pub steps: usize,
    /// Trajectories per minibatch.
    pub minibatch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub snapshot_every: usize,
    /// Step at which the "unlearned" snapshot is captured (0 disables).
    pub unlearn_capture_step: usize,
    pub extreme_select: ExtremeSelect,
    pub validate_every: usize,
    pub value_pretrain_steps: usize,
    pub value_lr: f64,
    /// Second-segment loss used after `switch_step` (0 disables switching).
    pub switch_step: usize,
    pub recovery_loss: LossKind,
    /// AVG@K logging cadence; 0 logs only the first and last step.
    pub eval_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            enabled: false,
            tag_prefix: String::new(),
            loss: LossSpec::of_kind(LossKind::Ce),
            steps: 60,
            minibatch: 32,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            snapshot_every: 5,
            unlearn_capture_step: 15,
            extreme_select: ExtremeSelect::Final,
            validate_every: 10,
            value_pretrain_steps: 20,
            value_lr: 5e-2,
            switch_step: 0,
            recovery_loss: LossKind::Ce,
            eval_every: 0,
        }
    }
}

impl Stage1Config {
    fn teacher2_default() -> Self {
        Self {
            tag_prefix: "t2.".into(),
            loss: LossSpec::of_kind(LossKind::Mse),
            ..Self::default()
        }
    }

    pub fn tag(&self, name: &str) -> String {
        format!("{}{}", self.tag_prefix, name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    /// Trajectories per minibatch; 0 uses the full batch every step.
    pub minibatch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_weight: f64,
    pub entropy_weight: f64,
    pub signal: SignalSpec,
    /// Compact signals `strategy:numerator:denominator[:mask]`; when
    /// nonempty they replace `signal` and run block by block.
    pub ensemble: Vec<String>,
    pub ensemble_blocks: Vec<usize>,
    pub eval_every: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 16,
            minibatch: 0,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            eps_low: 0.2,
            eps_high: 0.28,
            kl_weight: 0.0,
            entropy_weight: 0.0,
            signal: SignalSpec::default(),
            ensemble: Vec::new(),
            ensemble_blocks: Vec::new(),
            eval_every: 0,
        }
    }
}

impl Stage2Config {
    /// The signal list and block lengths this config runs.
    pub fn schedule_parts(&self) -> Result<(Vec<SignalSpec>, Vec<usize>)> {
        if self.ensemble.is_empty() {
            return Ok((vec![self.signal.clone()], vec![self.steps]));
        }
        let specs = self
            .ensemble
            .iter()
            .map(|s| SignalSpec::parse_compact(s))
            .collect::<Result<Vec<_>>>()?;
        Ok((specs, self.ensemble_blocks.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_batches: usize,
    /// Per-batch compact signal specs; batches past the end reuse `stage2.signal`.
    pub strategy_per_batch: Vec<String>,
    /// Per-batch teacher loss kinds; batches past the end reuse `stage1.loss.kind`.
    pub loss_per_batch: Vec<String>,
    pub online_interleave: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_batches: 1,
            strategy_per_batch: Vec::new(),
            loss_per_batch: Vec::new(),
            online_interleave: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub steps: usize,
    pub n_prompts: usize,
    pub k: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub eval_every: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            steps: 60,
            n_prompts: 4,
            k: 8,
            lr: 1e-2,
            optimizer: OptimizerKind::Adam,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    #[serde(rename = "K")]
    pub k: usize,
    /// Held-out evaluation prompts; 0 uses the whole prompt space.
    pub n_eval_prompts: usize,
    pub temperature: f64,
    /// Fresh rollouts per reverse-KL estimate.
    pub kl_rollouts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 16,
            n_eval_prompts: 0,
            temperature: 1.0,
            kl_rollouts: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Wall-clock timings make CSVs non-reproducible, so they are opt-in.
    pub record_wall_ms: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            env: EnvSpec::default(),
            model: ModelConfig::default(),
            base: BaseConfig::default(),
            rollout: RolloutConfig::default(),
            stage1: Stage1Config::default(),
            teacher2: Stage1Config::teacher2_default(),
            stage2: Stage2Config::default(),
            pipeline: PipelineConfig::default(),
            online: OnlineConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn encoder(&self) -> Result<FeatureEncoder> {
        FeatureEncoder::new(self.env, self.model.context)
    }

    pub fn policy_shape(&self) -> Result<PolicyShape> {
        let enc = self.encoder()?;
        if self.model.feat != 0 && self.model.feat != enc.feat() {
            return Err(Error::config(format!(
                "model.feat = {} but the state encoding has {} features",
                self.model.feat,
                enc.feat()
            )));
        }
        if self.model.vocab != 0 && self.model.vocab != self.env.vocab {
            return Err(Error::config("model.vocab must equal env.vocab"));
        }
        PolicyShape::new(enc.feat(), self.model.hidden, self.env.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policy_shape()?;
        let r = &self.rollout;
        if r.n_prompts == 0 || r.k < 2 || !(r.temperature > 0.0) {
            return Err(Error::config("rollout needs n_prompts >= 1, k >= 2, temperature > 0"));
        }
        let n_traj = r.n_prompts * r.k;
        for (name, s1) in [("stage1", &self.stage1), ("teacher2", &self.teacher2)] {
            if name == "teacher2" && !s1.enabled {
                continue;
            }
            s1.loss.validate()?;
            if s1.minibatch == 0 || s1.minibatch > n_traj {
                return Err(Error::config(format!(
                    "{name}.minibatch must be in 1..={n_traj} (trajectories per batch)"
                )));
            }
            if !(s1.lr > 0.0) {
                return Err(Error::config(format!("{name}.lr must be positive")));
            }
        }
        if self.teacher2.enabled && self.teacher2.tag_prefix.is_empty() {
            return Err(Error::config("teacher2.tag_prefix must be nonempty"));
        }
        let s2 = &self.stage2;
        if s2.minibatch > n_traj {
            return Err(Error::config(format!("stage2.minibatch must be <= {n_traj}")));
        }
        if !(s2.eps_low > 0.0 && s2.eps_low < 1.0 && s2.eps_high > 0.0 && s2.eps_high < 1.0) {
            return Err(Error::config("stage2.eps_low and stage2.eps_high must lie in (0, 1)"));
        }
        if !(s2.kl_weight >= 0.0 && s2.entropy_weight >= 0.0) {
            return Err(Error::config("stage2 weights must be >= 0"));
        }
        if !s2.ensemble.is_empty() {
            let (specs, blocks) = s2.schedule_parts()?;
            crate::distill::ensemble_schedule(&specs, &blocks)?;
        }
        for s in &self.pipeline.strategy_per_batch {
            SignalSpec::parse_compact(s)?;
        }
        for l in &self.pipeline.loss_per_batch {
            l.parse::<LossKind>()?;
        }
        if self.pipeline.n_batches == 0 {
            return Err(Error::config("pipeline.n_batches must be >= 1"));
        }
        if self.eval.k == 0 {
            return Err(Error::config("eval.K must be >= 1"));
        }
        if self.online.k < 2 || self.online.n_prompts == 0 {
            return Err(Error::config("online needs n_prompts >= 1 and k >= 2"));
        }
        Ok(())
    }

    /// Evolving-strategy specs must not name a denominator that is required.
    pub fn stage2_signal_strategy(&self) -> SignalStrategy {
        self.stage2.signal.strategy
    }

    /// Parses a config document and applies `key=value` overrides.
    pub fn from_sources(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let defaults = Value::try_from(RunConfig::default())
            .map_err(|e| Error::config(format!("cannot serialize defaults: {e}")))?;
        let defaults = match defaults {
            Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let mut merged = defaults.clone();
        if let Some(text) = text {
            let doc: Table = toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
            let mut leaves = Vec::new();
            flatten_leaves(&doc, String::new(), &mut leaves);
            for (key, value) in leaves {
                set_path(&mut merged, &defaults, &key, value)?;
            }
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` must look like key=value")))?;
            set_path(&mut merged, &defaults, key.trim(), parse_override_value(raw.trim()))?;
        }
        let cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering of the full config.
    pub fn to_flat_text(&self) -> String {
        let value = Value::try_from(self.clone()).expect("config serializes");
        let mut leaves = Vec::new();
        if let Value::Table(t) = value {
            flatten_leaves(&t, String::new(), &mut leaves);
        }
        leaves
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn flatten_leaves(table: &Table, prefix: String, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten_leaves(t, key, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn parse_override_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Writes `value` at dotted `key`, which must exist in `defaults`.
fn set_path(target: &mut Table, defaults: &Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let unknown = || Error::config(format!("unknown config key `{key}`"));
    let mut tgt = target;
    let mut def = defaults;
    for part in &parts[..parts.len() - 1] {
        def = match def.get(*part) {
            Some(Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
        tgt = match tgt.get_mut(*part) {
            Some(Value::Table(t)) => t,
            _ => return Err(unknown()),
        };
    }
    let leaf = parts[parts.len() - 1];
    let template = match def.get(leaf) {
        Some(Value::Table(_)) | None => return Err(unknown()),
        Some(v) => v,
    };
    let value = match (template, value) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::Array(_), Value::String(s)) => Value::Array(
            s.split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|p| parse_override_value(p.trim()))
                .collect(),
        ),
        (_, v) => v,
    };
    tgt.insert(leaf.to_string(), value);
    Ok(())
}
