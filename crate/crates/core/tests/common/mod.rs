//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod cli;
pub mod fidelity;

use distill_lab::env::{rollout, EnvKind, EnvSpec, FeatureEncoder, TokenTable, Trajectory, TrajectoryBatch};
use distill_lab::policy::{PolicyParams, PolicyShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_env() -> EnvSpec {
    EnvSpec {
        kind: EnvKind::ReverseCopy,
        prompt_len: 2,
        vocab: 5,
        max_gen_len: 4,
        eos_token: 4,
        alphabet: 3,
    }
}

pub fn encoder(env: EnvSpec) -> FeatureEncoder {
    FeatureEncoder::new(env, 2).unwrap()
}

pub fn shape_for(enc: &FeatureEncoder, hidden: usize) -> PolicyShape {
    PolicyShape::new(enc.feat(), hidden, enc.env().vocab).unwrap()
}

/// `base + noise·N(0,1)` elementwise.
pub fn perturbed<R: Rng>(base: &PolicyParams, noise: f64, rng: &mut R) -> PolicyParams {
    let other = PolicyParams::random(base.shape(), noise, rng);
    let data: Vec<f64> = base.as_slice().iter().zip(other.as_slice()).map(|(a, b)| a + b).collect();
    PolicyParams::from_flat(base.shape(), data).unwrap()
}

/// Rollouts of `collector` on `groups` random prompts with `k` samples each.
/// With `random_rewards`, labels are redrawn so every group is mixed, which
/// keeps group-normalized advantages nonzero on tiny batches.
pub fn batch_from<R: Rng>(
    collector: &PolicyParams,
    enc: &FeatureEncoder,
    groups: usize,
    k: usize,
    random_rewards: bool,
    rng: &mut R,
) -> TrajectoryBatch {
    let env = *enc.env();
    let mut out = Vec::with_capacity(groups);
    for _ in 0..groups {
        let prompt = env.prompt_at(rng.random_range(0..env.prompt_space()));
        let mut group: Vec<Trajectory> = (0..k)
            .map(|_| rollout(collector, enc, &prompt, 1.0, rng).unwrap())
            .collect();
        if random_rewards {
            for (j, t) in group.iter_mut().enumerate() {
                t.reward = match j {
                    0 => 1.0,
                    1 => 0.0,
                    _ => f64::from(rng.random_bool(0.5) as u8),
                };
            }
        }
        out.push(group);
    }
    TrajectoryBatch::new(env, out, "old", false).unwrap()
}

/// A randomized (table, collector, current policy) triple.
pub struct Instance {
    pub enc: FeatureEncoder,
    pub table: TokenTable,
    pub old: PolicyParams,
    pub policy: PolicyParams,
}

pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let enc = encoder(small_env());
    let hidden = 3 + (seed % 4) as usize;
    let old = PolicyParams::random(shape_for(&enc, hidden), 0.6, &mut r);
    let policy = perturbed(&old, 0.15, &mut r);
    let batch = batch_from(&old, &enc, 3, 3, true, &mut r);
    let table = TokenTable::from_batch(&batch, &enc);
    Instance { enc, table, old, policy }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

/// Policy-parameter FD check of an objective given as a closure.
pub fn policy_fd_error(
    policy: &PolicyParams,
    analytic: &[f64],
    mut objective: impl FnMut(&PolicyParams) -> f64,
) -> f64 {
    let shape = policy.shape();
    let numeric = numeric_grad(policy.as_slice(), FD_STEP, |x| {
        objective(&PolicyParams::from_flat(shape, x.to_vec()).unwrap())
    });
    max_rel_error(analytic, &numeric, FD_FLOOR)
}
