//! Property checks shared by the focused test files and the acceptance
//! runner. Each returns a one-line summary, or the reason it failed.

use distill_lab::distill::{build_signal, mask_signal, whiten, MaskMode, SignalSpec, SignalStrategy};
use distill_lab::env::{FeatureEncoder, TokenTable, Trajectory, TrajectoryBatch};
use distill_lab::harness::SnapshotStore;
use distill_lab::losses::{
    grpo_loss_and_grad, ppo_loss_and_grad, sapo_loss_and_grad, sapo_surrogate_loss_and_grad,
    surrogate_loss_and_grad, GaeSpec, LambdaRule, LossKind, LossSpec,
};
use distill_lab::metrics::{reverse_kl_estimate, reverse_kl_from_samples};
use distill_lab::policy::{snapshot, PolicyParams, PolicyShape, ValueParams};
use rand::Rng;

use super::fidelity::{worst_error, OBJECTIVES};
use super::{batch_from, encoder, perturbed, rng, shape_for, small_env};

pub type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradient_fidelity(instances: u64) -> Check {
    let mut worst = Vec::new();
    for name in OBJECTIVES {
        let err = worst_error(name, instances);
        ensure(err < 1e-4, || format!("{name}: max relative error {err:.3e}"))?;
        worst.push(err);
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Ok(format!(
        "{} objectives x {instances} instances, worst relative error {max:.2e}",
        OBJECTIVES.len()
    ))
}

/// One group of single-token trajectories from the empty-prefix state of
/// `prompt`; each entry is `(action, ratio π/π_old, reward)`.
pub fn single_token_table(
    policy: &PolicyParams,
    enc: &FeatureEncoder,
    prompt: &[usize],
    entries: &[(usize, f64, f64)],
) -> TokenTable {
    let s = enc.encode(prompt, &[]);
    let group = entries
        .iter()
        .map(|&(a, ratio, reward)| {
            let lp = policy.log_prob(&s, a).unwrap() - ratio.ln();
            assert!(lp <= 0.0, "ratio {ratio} needs a behavior prob above 1");
            Trajectory {
                prompt: prompt.to_vec(),
                actions: vec![a],
                behavior_logps: vec![lp],
                reward,
            }
        })
        .collect();
    let batch = TrajectoryBatch::new(*enc.env(), vec![group], "old", false).unwrap();
    TokenTable::from_batch(&batch, enc)
}

fn max_abs(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn clip_semantics() -> Check {
    let enc = encoder(small_env());
    let mut policy = PolicyParams::random(shape_for(&enc, 4), 0.3, &mut rng(11));
    // action 3 is rare so that ratios far below 1 have valid behavior probs
    policy.b2_mut()[3] = -5.0;
    let prompt = [0, 1];
    let spec = LossSpec::of_kind(LossKind::Grpo);
    let (lo, hi) = (1.0 - spec.eps_low, 1.0 + spec.eps_high);

    // positive advantage above 1+ε_high and negative advantage below 1−ε_low
    let dead = single_token_table(&policy, &enc, &prompt, &[(0, 1.6, 1.0), (1, 0.5, 0.0)]);
    let g = grpo_loss_and_grad(&dead, &policy, &spec).unwrap().grad;
    ensure(g.iter().all(|&v| v == 0.0), || format!("GRPO dead zone gradient {:.3e}", max_abs(&g)))?;

    let mut value = ValueParams::zeros(policy.shape().feat);
    value.v_b = 0.5;
    let gae = GaeSpec::new(LambdaRule::Dynamic, value);
    let g = ppo_loss_and_grad(&dead, &policy, &spec, &gae).unwrap().grad;
    ensure(g.iter().all(|&v| v == 0.0), || format!("PPO dead zone gradient {:.3e}", max_abs(&g)))?;

    for (r, adv) in [(hi + 1e-3, 1.0), (3.0, 0.7), (lo - 1e-3, -1.0), (0.1, -2.0)] {
        let t = single_token_table(&policy, &enc, &prompt, &[(3, r, 1.0)]);
        let g = surrogate_loss_and_grad(&t, &policy, &[adv], spec.eps_low, spec.eps_high)
            .unwrap()
            .grad;
        ensure(g.iter().all(|&v| v == 0.0), || format!("surrogate r={r} A={adv} not dead"))?;
    }

    // the gate slope decays like exp(-τ(r-1)): above 1e-12 well past the
    // clip band, and never exactly zero
    let mut sapo_min = f64::INFINITY;
    for i in 0..=38 {
        let r = 0.05 * (1.2f64).powi(i);
        for adv in [1.0, -1.0] {
            let t = single_token_table(&policy, &enc, &prompt, &[(3, r, 1.0)]);
            let g = sapo_surrogate_loss_and_grad(&t, &policy, &[adv], spec.tau_pos, spec.tau_neg)
                .unwrap()
                .grad;
            let m = max_abs(&g);
            if r <= 17.2 {
                ensure(m > 1e-12, || format!("SAPO gradient {m:.2e} at r={r} A={adv}"))?;
                sapo_min = sapo_min.min(m);
            } else {
                ensure(m > 0.0, || format!("SAPO gradient exactly zero at r={r} A={adv}"))?;
            }
        }
    }
    let g = sapo_loss_and_grad(&dead, &policy, &spec).unwrap().grad;
    ensure(max_abs(&g) > 1e-12, || "SAPO gradient vanished on the clipped batch".into())?;

    // inside the trust region the same tokens do move
    let live = single_token_table(&policy, &enc, &prompt, &[(0, 1.1, 1.0), (1, 0.9, 0.0)]);
    let g = grpo_loss_and_grad(&live, &policy, &spec).unwrap().grad;
    ensure(max_abs(&g) > 1e-12, || "GRPO gradient zero inside the trust region".into())?;

    Ok(format!("GRPO/PPO dead zones exactly 0; SAPO min |grad| {sapo_min:.2e} over r in [0.05, 17], nonzero to r = 52"))
}

/// Mean and population std computed independently of the library.
fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn whitening_masking() -> Check {
    let mut r = rng(21);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for trial in 0..200 {
        let n = 2 + trial % 50;
        let scale = 10f64.powi(r.random_range(-3..4));
        let offset = r.random_range(-100.0..100.0);
        let v: Vec<f64> = (0..n).map(|_| offset + scale * r.random_range(-1.0..1.0)).collect();
        let w = whiten(&v);
        let (m, s) = moments(&w);
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((s - 1.0).abs());
    }
    ensure(worst_mean < 1e-9, || format!("post-whiten mean {worst_mean:.3e}"))?;
    ensure(worst_std < 1e-6, || format!("post-whiten std off by {worst_std:.3e}"))?;

    for degenerate in [vec![], vec![3.5], vec![2.0; 7], vec![-1e6; 4]] {
        let w = whiten(&degenerate);
        ensure(w.len() == degenerate.len() && w.iter().all(|&x| x == 0.0), || {
            format!("degenerate input {degenerate:?} gave {w:?}")
        })?;
    }

    // mask-then-whiten through the store matches the composed oracle
    let enc = encoder(small_env());
    let old = PolicyParams::random(shape_for(&enc, 4), 0.5, &mut r);
    let teacher = perturbed(&old, 0.4, &mut r);
    let batch = batch_from(&old, &enc, 4, 3, false, &mut r);
    let table = TokenTable::from_batch(&batch, &enc);
    let mut store = SnapshotStore::new();
    store.insert(snapshot(&old, 0, "old").unwrap()).unwrap();
    store.insert(snapshot(&teacher, 9, "extreme").unwrap()).unwrap();
    let raw: Vec<f64> = table
        .tokens()
        .iter()
        .map(|t| teacher.log_prob(&t.state, t.action).unwrap() - old.log_prob(&t.state, t.action).unwrap())
        .collect();
    for (mask, clip) in [
        (MaskMode::None, None),
        (MaskMode::KeepNonneg, Some(true)),
        (MaskMode::KeepNonpos, Some(false)),
    ] {
        let mut spec = SignalSpec::new(SignalStrategy::S1FixedOld, "extreme", "old");
        spec.mask = mask;
        let sig = build_signal(&table, &spec, &store, &old).unwrap();
        let masked: Vec<f64> = raw
            .iter()
            .map(|&x| match clip {
                None => x,
                Some(true) => x.max(0.0),
                Some(false) => x.min(0.0),
            })
            .collect();
        let (m, s) = moments(&masked);
        for (i, (&got, &x)) in sig.values.iter().zip(&masked).enumerate() {
            let want = (x - m) / s;
            ensure((got - want).abs() < 1e-9, || {
                format!("{mask:?} token {i}: built {got} vs oracle {want}")
            })?;
        }
        if clip.is_some() {
            let (wrong_order, _) = mask_signal(&whiten(&raw), mask);
            let differs = wrong_order.iter().zip(&sig.values).any(|(a, b)| (a - b).abs() > 1e-6);
            ensure(differs, || format!("{mask:?}: whiten-then-mask indistinguishable"))?;
        }
    }
    Ok(format!(
        "|mean| <= {worst_mean:.1e}, |std-1| <= {worst_std:.1e}; degenerate -> 0; mask-then-whiten matches oracle"
    ))
}

/// Policy whose next-token distribution is `softmax(logits)` in every state.
pub fn state_free_policy(shape: PolicyShape, logits: &[f64]) -> PolicyParams {
    let mut p = PolicyParams::zeros(shape);
    p.b2_mut().copy_from_slice(logits);
    p
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn exact_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

pub fn kl_estimator() -> Check {
    let mut r = rng(31);
    let mut worst_z: f64 = 0.0;

    // two-action single state, sampled directly
    let (p, q) = ([0.8, 0.2], [0.5, 0.5]);
    let exact = exact_kl(&p, &q);
    ensure((exact - 0.192745).abs() < 1e-6, || format!("exact KL {exact}"))?;
    let pairs: Vec<(f64, f64)> = (0..10_000)
        .map(|_| {
            let a = usize::from(!r.random_bool(p[0]));
            (p[a].ln(), q[a].ln())
        })
        .collect();
    let est = reverse_kl_from_samples(&pairs);
    let z = (est.mean - exact).abs() / est.se;
    ensure(z < 3.0, || format!("two-action estimate {} vs {exact} ({z:.2} SE)", est.mean))?;
    worst_z = worst_z.max(z);

    // rollout estimator with state-independent policies: every generated
    // token is an independent draw, so the per-token KL is exact enumeration
    let enc = encoder(small_env());
    let shape = shape_for(&enc, 3);
    let v = enc.env().vocab;
    for case in 0..5 {
        let zp: Vec<f64> = (0..v).map(|_| r.random_range(-1.5..1.5)).collect();
        let zq: Vec<f64> = (0..v).map(|_| r.random_range(-1.5..1.5)).collect();
        let (pol, refp) = (state_free_policy(shape, &zp), state_free_policy(shape, &zq));
        let exact = exact_kl(&softmax(&zp), &softmax(&zq));
        let mut n = 2500;
        let est = loop {
            let e = reverse_kl_estimate(&pol, &refp, &enc, n, &mut rng(100 + case)).unwrap();
            if e.n_tokens >= 10_000 {
                break e;
            }
            n *= 2;
        };
        let z = (est.mean - exact).abs() / est.se;
        ensure(z < 3.0, || format!("case {case}: estimate {} vs exact {exact} ({z:.2} SE)", est.mean))?;
        worst_z = worst_z.max(z);

        let same = reverse_kl_estimate(&pol, &pol, &enc, 64, &mut rng(7)).unwrap();
        ensure(same.mean == 0.0 && same.se == 0.0, || format!("identical policies gave {}", same.mean))?;
    }
    Ok(format!("6 enumerated cases at >= 10^4 tokens, worst deviation {worst_z:.2} SE; identical policies exactly 0"))
}
