mod common;

use common::checks::single_token_table;
use common::{batch_from, encoder, instance, perturbed, rng, shape_for, small_env};
use distill_lab::distill::{
    build_signal, distill_objective_and_grad, mask_signal, refresh_signal, whiten, DistillStepConfig, MaskMode,
    SignalSpec, SignalStrategy,
};
use distill_lab::env::{terminal_reward, EnvKind, EnvSpec, TokenTable, TrajectoryBatch};
use distill_lab::harness::{stage1_train, Lab, RunConfig, SnapshotStore};
use distill_lab::losses::{
    broadcast_to_tokens, ce_loss_and_grad, grpo_loss_and_grad, kl_penalty, mse_loss_and_grad, ppo_loss_and_grad,
    sapo_loss_and_grad, sapo_surrogate_loss_and_grad, surrogate_loss_and_grad, GaeSpec, LambdaRule, LossKind,
    LossSpec,
};
use distill_lab::metrics::{explained_variance, read_metrics_csv, write_metrics_csv, MetricsRow, Phase};
use distill_lab::policy::{snapshot, PolicyParams, ValueParams};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn policy_distributions_are_normalized(seed in any::<u64>(), scale in 0.05f64..3.0) {
        let enc = encoder(small_env());
        let mut r = rng(seed);
        let p = PolicyParams::random(shape_for(&enc, 5), scale, &mut r);
        let v = enc.env().vocab;
        for prefix in [vec![], vec![1], vec![2, 0], vec![4, 4, 1]] {
            let s = enc.encode(&[r.random_range(0..3), r.random_range(0..3)], &prefix);
            let lp: Vec<f64> = (0..v).map(|a| p.log_prob(&s, a).unwrap()).collect();
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);

            let mut score = vec![0.0; p.as_slice().len()];
            for (a, l) in lp.iter().enumerate() {
                for (acc, g) in score.iter_mut().zip(p.grad_log_prob(&s, a).unwrap()) {
                    *acc += l.exp() * g;
                }
            }
            prop_assert!(score.iter().all(|g| g.abs() < 1e-8));

            let h = p.entropy(&s).unwrap();
            prop_assert!(h >= 0.0 && h <= (v as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn stored_batches_rescore_and_replay(seed in any::<u64>(), groups in 1usize..5, k in 2usize..5) {
        let enc = encoder(small_env());
        let p = PolicyParams::random(shape_for(&enc, 4), 0.7, &mut rng(seed));
        let batch = batch_from(&p, &enc, groups, k, false, &mut rng(seed ^ 1));
        prop_assert!(batch.groups().iter().all(|g| g.len() == k));
        for t in batch.trajectories() {
            prop_assert_eq!(terminal_reward(batch.env(), &t.prompt, &t.actions), t.reward);
            for (pos, (&a, &lp)) in t.actions.iter().zip(&t.behavior_logps).enumerate() {
                let s = enc.encode(&t.prompt, &t.actions[..pos]);
                prop_assert!((p.log_prob(&s, a).unwrap() - lp).abs() <= 1e-12);
            }
        }
        let again = batch_from(&p, &enc, groups, k, false, &mut rng(seed ^ 1));
        prop_assert_eq!(batch, again);
    }

    #[test]
    fn surrogates_coincide_at_the_behavior_policy(seed in any::<u64>()) {
        let inst = instance(seed);
        let table = &inst.table;
        // behavior policy: every ratio is exactly 1
        let at_old = &inst.old;
        let spec = LossSpec::of_kind(LossKind::Grpo);

        let grpo = grpo_loss_and_grad(table, at_old, &spec).unwrap();
        let sapo = sapo_loss_and_grad(table, at_old, &spec).unwrap();
        prop_assert!((grpo.objective - sapo.objective).abs() < 1e-8);
        prop_assert!(close(&grpo.grad, &sapo.grad, 1e-8));

        let rewards: Vec<f64> = table.trajectories().iter().map(|t| t.reward).collect();
        let adv = broadcast_to_tokens(table, &rewards);
        let gae = GaeSpec::new(LambdaRule::Fixed(1.0), ValueParams::zeros(at_old.shape().feat));
        let ppo = ppo_loss_and_grad(table, at_old, &spec, &gae).unwrap();
        let clipped = surrogate_loss_and_grad(table, at_old, &adv, spec.eps_low, spec.eps_high).unwrap();
        let smooth = sapo_surrogate_loss_and_grad(table, at_old, &adv, spec.tau_pos, spec.tau_neg).unwrap();
        prop_assert!((ppo.objective - clipped.objective).abs() < 1e-8);
        prop_assert!((ppo.objective - smooth.objective).abs() < 1e-8);
        prop_assert!(close(&ppo.grad, &smooth.grad, 1e-8));

        let ce = ce_loss_and_grad(table, at_old, at_old, &LossSpec::of_kind(LossKind::Ce)).unwrap();
        prop_assert!((ce.objective - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_penalty_is_nonnegative_and_zero_only_at_reference(seed in any::<u64>(), noise in 0.0f64..1.0) {
        let inst = instance(seed);
        let moved = perturbed(&inst.old, noise, &mut rng(seed ^ 2));
        let k = kl_penalty(&inst.table, &moved, &inst.old).unwrap().objective;
        prop_assert!(k >= 0.0);
        let same = kl_penalty(&inst.table, &inst.old, &inst.old).unwrap();
        prop_assert_eq!(same.objective, 0.0);
        prop_assert!(same.grad.iter().all(|&g| g == 0.0));
        if noise > 0.05 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn mse_ignores_trajectory_order(seed in any::<u64>()) {
        let enc = encoder(small_env());
        let p = PolicyParams::random(shape_for(&enc, 4), 0.7, &mut rng(seed));
        let batch = batch_from(&p, &enc, 3, 3, true, &mut rng(seed ^ 3));
        let mut groups: Vec<_> = batch.groups().to_vec();
        let mut r = rng(seed ^ 4);
        groups.shuffle(&mut r);
        for g in &mut groups {
            g.shuffle(&mut r);
        }
        let shuffled = TrajectoryBatch::new(*batch.env(), groups, "old", false).unwrap();
        let a = mse_loss_and_grad(&TokenTable::from_batch(&batch, &enc), &p).unwrap();
        let b = mse_loss_and_grad(&TokenTable::from_batch(&shuffled, &enc), &p).unwrap();
        prop_assert!((a.objective - b.objective).abs() < 1e-12);
        prop_assert!(close(&a.grad, &b.grad, 1e-12));
    }

    #[test]
    fn whitening_is_standardizing_or_zero(values in prop::collection::vec(-1e3f64..1e3, 0..64)) {
        let w = whiten(&values);
        prop_assert_eq!(w.len(), values.len());
        prop_assert!(w.iter().all(|v| v.is_finite()));
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let spread = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        if values.len() >= 2 && spread > 1e-6 {
            let wm = w.iter().sum::<f64>() / n;
            let ws = (w.iter().map(|v| (v - wm).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(wm.abs() < 1e-9);
            prop_assert!((ws - 1.0).abs() < 1e-6);
        }
        if spread == 0.0 {
            prop_assert!(w.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn signals_are_whitened_masks_and_frozen(seed in any::<u64>(), mask_id in 0usize..3) {
        let inst = instance(seed);
        let teacher = perturbed(&inst.old, 0.3, &mut rng(seed ^ 5));
        let mut store = SnapshotStore::new();
        store.insert(snapshot(&inst.old, 0, "old").unwrap()).unwrap();
        store.insert(snapshot(&teacher, 4, "extreme").unwrap()).unwrap();
        let mask = [MaskMode::None, MaskMode::KeepNonneg, MaskMode::KeepNonpos][mask_id];
        let mut spec = SignalSpec::new(SignalStrategy::S1FixedOld, "extreme", "old");
        spec.mask = mask;
        let sig = build_signal(&inst.table, &spec, &store, &inst.old).unwrap();
        prop_assert_eq!(&sig.values, &whiten(&mask_signal(&sig.raw, mask).0));
        // a fixed-denominator signal ignores the live policy
        let again = build_signal(&inst.table, &spec, &store, &inst.policy).unwrap();
        prop_assert_eq!(&sig, &again);

        // the evolving signal vanishes once the live policy reaches the teacher
        let evolving = SignalSpec::new(SignalStrategy::S1Evolving, "extreme", "");
        let start = build_signal(&inst.table, &evolving, &store, &inst.old).unwrap();
        let done = refresh_signal(&start, &inst.table, &teacher, &teacher).unwrap();
        prop_assert!(done.values.iter().all(|&v| v == 0.0));
        prop_assert!(done.raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn explained_variance_is_at_most_one(
        pairs in prop::collection::vec((0.0f64..1.0, prop::bool::ANY), 2..40),
    ) {
        let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
        let r: Vec<f64> = pairs.iter().map(|x| f64::from(x.1 as u8)).collect();
        match explained_variance(&p, &r) {
            Some(ev) => {
                prop_assert!(ev <= 1.0);
                prop_assert_eq!(explained_variance(&r, &r), Some(1.0));
            }
            None => prop_assert!(r.iter().all(|&v| v == r[0])),
        }
    }

    #[test]
    fn metrics_rows_round_trip_with_empty_cells(
        step in 0usize..10_000,
        vals in prop::collection::vec(prop::option::of(-1e6f64..1e6), 6),
    ) {
        let mut row = MetricsRow::new(step, Phase::Stage2);
        row.objective = 0.125;
        row.avg_at_k = vals[0];
        row.pos_prob = vals[1];
        row.neg_prob = vals[2];
        row.ratio_diag = vals[3];
        row.explained_var = vals[4];
        row.wall_ms = vals[5].map(f64::abs);
        let text = write_metrics_csv(std::slice::from_ref(&row));
        let line = text.lines().nth(1).unwrap();
        let cells: Vec<&str> = line.split(',').collect();
        prop_assert_eq!(cells.len(), 12);
        for (cell, v) in cells[6..].iter().zip(&vals) {
            prop_assert_eq!(cell.is_empty(), v.is_none());
        }
        let back = read_metrics_csv(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].avg_at_k.is_some(), row.avg_at_k.is_some());
        prop_assert_eq!(write_metrics_csv(&back), text);
    }
}

#[test]
fn distill_dead_zone_matches_losses() {
    let enc = encoder(small_env());
    let policy = PolicyParams::random(shape_for(&enc, 4), 0.3, &mut rng(3));
    let cfg = DistillStepConfig {
        eps_low: 0.2,
        eps_high: 0.28,
        kl_weight: 0.0,
        entropy_weight: 0.0,
    };
    let table = single_token_table(&policy, &enc, &[1, 2], &[(0, 1.5, 1.0), (1, 0.6, 0.0)]);
    let (out, _) = distill_objective_and_grad(&table, &policy, &[1.0, -1.0], &cfg).unwrap();
    assert!(out.grad.iter().all(|&g| g == 0.0));
    let (out, _) = distill_objective_and_grad(&table, &policy, &[-1.0, 1.0], &cfg).unwrap();
    assert!(out.grad.iter().any(|&g| g != 0.0));
}

#[test]
fn stage1_keeps_its_batch_and_old_snapshot() {
    let cfg = RunConfig::from_sources(
        None,
        &[
            "rollout.n_prompts=6".into(),
            "rollout.k=4".into(),
            "stage1.minibatch=8".into(),
            "stage1.steps=20".into(),
            "eval.kl_rollouts=8".into(),
            "eval.K=2".into(),
        ],
    )
    .unwrap();
    let lab = Lab::new(cfg).unwrap();
    let base = lab.base_policy().unwrap();
    let batch = lab.collect(&base, 0, "old").unwrap();
    let before = batch.clone();
    let table = TokenTable::from_batch(&batch, &lab.enc);
    let mut store = SnapshotStore::new();
    store.insert(snapshot(&base, 0, "old").unwrap()).unwrap();
    stage1_train(&lab, &lab.cfg.stage1, &table, &mut store, 0).unwrap();
    assert_eq!(batch, before);
    for t in batch.trajectories() {
        assert_eq!(terminal_reward(batch.env(), &t.prompt, &t.actions), t.reward);
    }
    assert_eq!(store.get("old").unwrap().params(), &base);
    let unlearned = store.get("unlearned").unwrap().step();
    assert!((10..=30).contains(&unlearned), "unlearned captured at {unlearned}");
}

#[test]
fn env_enumeration_oracles() {
    let rc = small_env();
    let prompts = rc.all_prompts();
    assert_eq!(prompts.len(), 9);
    assert_eq!(prompts[0], vec![0, 0]);
    assert_eq!(prompts[5], vec![1, 2]);
    assert_eq!(rc.correct_answer(&[1, 2]), vec![2, 1, 4]);

    let modsum = EnvSpec {
        kind: EnvKind::Modsum,
        ..rc
    };
    for p in modsum.all_prompts() {
        let answer = modsum.correct_answer(&p);
        assert_eq!(answer, vec![(p[0] + p[1]) % 3, 4]);
        // exactly one of the alphabet^answer_len completions is rewarded
        let rewarded = (0..5)
            .flat_map(|a| (0..5).map(move |b| vec![a, b]))
            .filter(|y| terminal_reward(&modsum, &p, y) == 1.0)
            .count();
        assert_eq!(rewarded, 1);
    }

    let parity = EnvSpec {
        kind: EnvKind::Parity,
        prompt_len: 3,
        alphabet: 2,
        vocab: 4,
        eos_token: 3,
        max_gen_len: 3,
    };
    let ones: Vec<usize> = parity.all_prompts().iter().map(|p| parity.correct_answer(p)[0]).collect();
    assert_eq!(ones, vec![0, 1, 1, 0, 1, 0, 0, 1]);
    assert_eq!(terminal_reward(&parity, &[1, 1, 0], &[0, 3]), 1.0);
    assert_eq!(terminal_reward(&parity, &[1, 1, 0], &[0]), 0.0);
    assert_eq!(terminal_reward(&parity, &[1, 1, 0], &[0, 3, 3]), 0.0);
}
