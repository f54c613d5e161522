//! Softmax sequence policy: `z = w2 · tanh(w1 · s + b1) + b2`.
//!
//! Parameters live in one flat buffer with a fixed ordering:
//! `w1` (hidden × feat, row-major), `b1` (hidden), `w2` (vocab × hidden,
//! row-major), `b2` (vocab). Gradients, checkpoints and finite-difference
//! probes all use that same ordering.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer sizes of a policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub feat: usize,
    pub hidden: usize,
    pub vocab: usize,
}

impl PolicyShape {
    pub fn new(feat: usize, hidden: usize, vocab: usize) -> Result<Self> {
        if feat == 0 || hidden == 0 || vocab < 2 {
            return Err(Error::config(format!(
                "invalid policy shape feat={feat} hidden={hidden} vocab={vocab}"
            )));
        }
        Ok(Self { feat, hidden, vocab })
    }

    pub fn num_params(&self) -> usize {
        self.hidden * self.feat + self.hidden + self.vocab * self.hidden + self.vocab
    }

    fn b1_offset(&self) -> usize {
        self.hidden * self.feat
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.vocab * self.hidden
    }
}

/// Encoded (prompt, prefix) state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFeatures(Vec<f64>);

impl StateFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Policy parameters in the documented flat ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    /// Gaussian initialization with standard deviation `scale` on every entry.
    pub fn random<R: Rng + ?Sized>(shape: PolicyShape, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale.max(0.0)).expect("finite scale");
        let data = (0..shape.num_params()).map(|_| normal.sample(rng)).collect();
        Self { shape, data }
    }

    pub fn from_flat(shape: PolicyShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::config(format!(
                "flat parameter length {} does not match shape ({} expected)",
                data.len(),
                shape.num_params()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("parameters must be finite"));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn w1(&self) -> &[f64] {
        &self.data[..self.shape.b1_offset()]
    }

    pub fn b1(&self) -> &[f64] {
        &self.data[self.shape.b1_offset()..self.shape.w2_offset()]
    }

    pub fn w2(&self) -> &[f64] {
        &self.data[self.shape.w2_offset()..self.shape.b2_offset()]
    }

    pub fn b2(&self) -> &[f64] {
        &self.data[self.shape.b2_offset()..]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.shape.w2_offset(), self.shape.b2_offset());
        &mut self.data[a..b]
    }

    pub fn b2_mut(&mut self) -> &mut [f64] {
        let a = self.shape.b2_offset();
        &mut self.data[a..]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * direction`.
    pub fn add_scaled(&mut self, direction: &[f64], alpha: f64) {
        assert_eq!(direction.len(), self.data.len(), "direction length");
        for (p, d) in self.data.iter_mut().zip(direction) {
            *p += alpha * d;
        }
    }

    fn check_features(&self, s: &StateFeatures) -> Result<()> {
        if s.len() != self.shape.feat {
            return Err(Error::config(format!(
                "state has {} features, policy expects {}",
                s.len(),
                self.shape.feat
            )));
        }
        Ok(())
    }

    fn check_token(&self, a: usize) -> Result<()> {
        if a >= self.shape.vocab {
            return Err(Error::input(format!(
                "token {a} out of range for vocabulary of {}",
                self.shape.vocab
            )));
        }
        Ok(())
    }

    /// Full forward pass. Panics if `s` has the wrong length; the checked
    /// entry points below validate first.
    pub fn forward(&self, s: &StateFeatures) -> Forward {
        let PolicyShape { feat, hidden, vocab } = self.shape;
        assert_eq!(s.len(), feat, "feature length");
        let (w1, b1, w2, b2) = (self.w1(), self.b1(), self.w2(), self.b2());
        let x = s.values();
        let mut h = Vec::with_capacity(hidden);
        for j in 0..hidden {
            let row = &w1[j * feat..(j + 1) * feat];
            let mut acc = b1[j];
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            h.push(acc.tanh());
        }
        let mut logits = Vec::with_capacity(vocab);
        for a in 0..vocab {
            let row = &w2[a * hidden..(a + 1) * hidden];
            let mut acc = b2[a];
            for (w, hj) in row.iter().zip(&h) {
                acc += w * hj;
            }
            logits.push(acc);
        }
        let log_probs = log_softmax(&logits);
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Forward {
            hidden: h,
            logits,
            log_probs,
            probs,
        }
    }

    /// Adds `scale * dL/dθ` into `grad`, given `dlogits = dL/dz` at the state
    /// whose forward pass is `fwd`.
    pub fn backward_into(
        &self,
        s: &StateFeatures,
        fwd: &Forward,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let PolicyShape { feat, hidden, vocab } = self.shape;
        debug_assert_eq!(grad.len(), self.data.len());
        let w2 = self.w2();
        let x = s.values();
        let (b1_off, w2_off, b2_off) = (
            self.shape.b1_offset(),
            self.shape.w2_offset(),
            self.shape.b2_offset(),
        );
        let mut dh = vec![0.0; hidden];
        for a in 0..vocab {
            let g = scale * dlogits[a];
            if g == 0.0 {
                continue;
            }
            grad[b2_off + a] += g;
            let row = &w2[a * hidden..(a + 1) * hidden];
            let grow = &mut grad[w2_off + a * hidden..w2_off + (a + 1) * hidden];
            for j in 0..hidden {
                grow[j] += g * fwd.hidden[j];
                dh[j] += g * row[j];
            }
        }
        for j in 0..hidden {
            let dpre = dh[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad[b1_off + j] += dpre;
            let grow = &mut grad[j * feat..(j + 1) * feat];
            for (g, xi) in grow.iter_mut().zip(x) {
                *g += dpre * xi;
            }
        }
    }

    /// Adds `scale * ∇θ log π(a|s)` into `grad`.
    pub fn accumulate_grad_log_prob(
        &self,
        s: &StateFeatures,
        fwd: &Forward,
        a: usize,
        scale: f64,
        grad: &mut [f64],
    ) {
        let dlogits = score_logits(&fwd.probs, a);
        self.backward_into(s, fwd, &dlogits, scale, grad);
    }

    pub fn logits(&self, s: &StateFeatures) -> Result<Vec<f64>> {
        self.check_features(s)?;
        Ok(self.forward(s).logits)
    }

    pub fn log_prob(&self, s: &StateFeatures, a: usize) -> Result<f64> {
        self.check_features(s)?;
        self.check_token(a)?;
        Ok(self.forward(s).log_probs[a])
    }

    pub fn entropy(&self, s: &StateFeatures) -> Result<f64> {
        self.check_features(s)?;
        Ok(self.forward(s).entropy())
    }

    pub fn grad_log_prob(&self, s: &StateFeatures, a: usize) -> Result<Vec<f64>> {
        self.check_features(s)?;
        self.check_token(a)?;
        let fwd = self.forward(s);
        let mut grad = vec![0.0; self.data.len()];
        self.accumulate_grad_log_prob(s, &fwd, a, 1.0, &mut grad);
        Ok(grad)
    }

    /// Draws a token from `softmax(z / temperature)`. The returned log-prob is
    /// always the untempered `log π(a|s)`.
    pub fn sample_token<R: Rng + ?Sized>(
        &self,
        s: &StateFeatures,
        temperature: f64,
        rng: &mut R,
    ) -> Result<(usize, f64)> {
        self.check_features(s)?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::input(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let fwd = self.forward(s);
        let a = fwd.sample(temperature, rng);
        Ok((a, fwd.log_probs[a]))
    }
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Forward {
    pub fn entropy(&self) -> f64 {
        let h: f64 = self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| -p * l)
            .sum();
        h.max(0.0)
    }

    /// `dH/dz_j = -p_j (log p_j + H)`.
    pub fn entropy_logit_grad(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, l)| if *p > 0.0 { -p * (l + h) } else { 0.0 })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> usize {
        let scaled: Vec<f64> = self.logits.iter().map(|z| z / temperature).collect();
        let probs: Vec<f64> = log_softmax(&scaled).iter().map(|l| l.exp()).collect();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (a, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last_positive = a;
            }
            acc += p;
            if u < acc {
                return a;
            }
        }
        last_positive
    }
}

/// `∂ log softmax(z)[a] / ∂z = e_a − p`.
pub fn score_logits(probs: &[f64], a: usize) -> Vec<f64> {
    let mut d: Vec<f64> = probs.iter().map(|p| -p).collect();
    d[a] += 1.0;
    d
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Linear value head `v(s) = v_w · s + v_b`, used only by the PPO teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub v_w: Vec<f64>,
    pub v_b: f64,
}

impl ValueParams {
    pub fn zeros(feat: usize) -> Self {
        Self {
            v_w: vec![0.0; feat],
            v_b: 0.0,
        }
    }

    pub fn predict(&self, s: &StateFeatures) -> f64 {
        self.v_b
            + self
                .v_w
                .iter()
                .zip(s.values())
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    /// Flat layout: `v_w` followed by `v_b`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.v_w.clone();
        v.push(self.v_b);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let (w, b) = flat.split_at(flat.len() - 1);
        Self {
            v_w: w.to_vec(),
            v_b: b[0],
        }
    }
}

/// Immutable copy of a policy captured at a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    params: PolicyParams,
    step: usize,
    tag: String,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Same parameters under a different tag.
    pub fn retagged(&self, tag: &str) -> Result<Self> {
        snapshot(&self.params, self.step, tag)
    }
}

pub fn snapshot(params: &PolicyParams, step: usize, tag: &str) -> Result<PolicySnapshot> {
    if tag.trim().is_empty() {
        return Err(Error::input("snapshot tag must be nonempty"));
    }
    Ok(PolicySnapshot {
        params: params.clone(),
        step,
        tag: tag.to_string(),
    })
}

pub fn restore(snap: &PolicySnapshot) -> PolicyParams {
    snap.params.clone()
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// 17 significant digits, enough for an exact f64 round trip.
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_array(out: &mut String, name: &str, values: &[f64]) {
    out.push_str(name);
    out.push_str(" = [");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&fmt17(*v));
    }
    out.push_str("]\n");
}

/// Serializes a snapshot as a checkpoint document.
pub fn write_checkpoint(snap: &PolicySnapshot) -> String {
    let p = &snap.params;
    let shape = p.shape();
    let mut out = String::new();
    let _ = writeln!(out, "format_version = {CHECKPOINT_FORMAT_VERSION}");
    let _ = writeln!(out, "feat = {}", shape.feat);
    let _ = writeln!(out, "hidden = {}", shape.hidden);
    let _ = writeln!(out, "vocab = {}", shape.vocab);
    let _ = writeln!(out, "step = {}", snap.step);
    let _ = writeln!(out, "tag = {}", toml_string(&snap.tag));
    write_array(&mut out, "w1", p.w1());
    write_array(&mut out, "b1", p.b1());
    write_array(&mut out, "w2", p.w2());
    write_array(&mut out, "b2", p.b2());
    out
}

fn toml_string(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    feat: usize,
    hidden: usize,
    vocab: usize,
    step: usize,
    tag: String,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

pub fn read_checkpoint(text: &str) -> Result<PolicySnapshot> {
    let doc: CheckpointDoc = toml::from_str(text).map_err(|e| Error::parse("checkpoint", e))?;
    if doc.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::parse(
            "checkpoint",
            format!("unsupported format_version {}", doc.format_version),
        ));
    }
    let shape = PolicyShape::new(doc.feat, doc.hidden, doc.vocab)?;
    let lens = [
        (doc.w1.len(), shape.hidden * shape.feat, "w1"),
        (doc.b1.len(), shape.hidden, "b1"),
        (doc.w2.len(), shape.vocab * shape.hidden, "w2"),
        (doc.b2.len(), shape.vocab, "b2"),
    ];
    for (got, want, name) in lens {
        if got != want {
            return Err(Error::parse(
                "checkpoint",
                format!("{name} has {got} entries, expected {want}"),
            ));
        }
    }
    let mut data = doc.w1;
    data.extend(doc.b1);
    data.extend(doc.w2);
    data.extend(doc.b2);
    let params = PolicyParams::from_flat(shape, data)?;
    snapshot(&params, doc.step, &doc.tag)
}
