//! Analytic vs central-difference gradients for every differentiable
//! objective, over randomized (policy, batch) instances.

use distill_lab::distill::{distill_objective_and_grad, DistillStepConfig};
use distill_lab::losses::{
    ce_loss_and_grad, entropy_regularizer, grpo_loss_and_grad, kl_penalty, mse_loss_and_grad,
    positive_likelihood_loss_and_grad, ppo_loss_and_grad, sapo_loss_and_grad, value_loss_and_grad, CeAggregate,
    GaeSpec, LambdaRule, LossKind, LossSpec,
};
use distill_lab::policy::{PolicyParams, ValueParams};
use rand::Rng;

use super::{instance, max_rel_error, numeric_grad, policy_fd_error, rng, FD_FLOOR, FD_STEP};

pub const OBJECTIVES: [&str; 10] = [
    "grpo",
    "ppo_policy",
    "ppo_value",
    "sapo",
    "ce",
    "mse",
    "distill_surrogate",
    "entropy",
    "kl_penalty",
    "positive_likelihood",
];

fn random_value<R: Rng>(feat: usize, rng: &mut R) -> ValueParams {
    let flat: Vec<f64> = (0..=feat).map(|_| rng.random_range(-0.5..0.5)).collect();
    ValueParams::from_flat(&flat)
}

/// Max relative error of objective `name` on instance `seed`.
pub fn objective_error(name: &str, seed: u64) -> f64 {
    let inst = instance(seed);
    let (table, policy, old) = (&inst.table, &inst.policy, &inst.old);
    let mut r = rng(seed ^ 0x5eed);
    let mut spec = LossSpec::of_kind(LossKind::Grpo);
    spec.beta = r.random_range(0.05..1.0);
    match name {
        "grpo" => {
            let a = grpo_loss_and_grad(table, policy, &spec).unwrap();
            policy_fd_error(policy, &a.grad, |p| grpo_loss_and_grad(table, p, &spec).unwrap().objective)
        }
        "ppo_policy" => {
            let gae = GaeSpec::new(LambdaRule::Dynamic, random_value(policy.shape().feat, &mut r));
            let a = ppo_loss_and_grad(table, policy, &spec, &gae).unwrap();
            policy_fd_error(policy, &a.grad, |p| ppo_loss_and_grad(table, p, &spec, &gae).unwrap().objective)
        }
        "ppo_value" => {
            let value = random_value(policy.shape().feat, &mut r);
            let (_, grad) = value_loss_and_grad(table, &value, 1.0);
            let numeric = numeric_grad(&value.flatten(), FD_STEP, |x| {
                value_loss_and_grad(table, &ValueParams::from_flat(x), 1.0).0
            });
            max_rel_error(&grad, &numeric, FD_FLOOR)
        }
        "sapo" => {
            let a = sapo_loss_and_grad(table, policy, &spec).unwrap();
            policy_fd_error(policy, &a.grad, |p| sapo_loss_and_grad(table, p, &spec).unwrap().objective)
        }
        "ce" => {
            spec.ce_aggregate = if seed % 2 == 0 { CeAggregate::Sum } else { CeAggregate::Mean };
            let a = ce_loss_and_grad(table, policy, old, &spec).unwrap();
            policy_fd_error(policy, &a.grad, |p| ce_loss_and_grad(table, p, old, &spec).unwrap().objective)
        }
        "mse" => {
            let a = mse_loss_and_grad(table, policy).unwrap();
            policy_fd_error(policy, &a.grad, |p| mse_loss_and_grad(table, p).unwrap().objective)
        }
        "distill_surrogate" => {
            let signal: Vec<f64> = (0..table.len()).map(|_| r.random_range(-2.0..2.0)).collect();
            let cfg = DistillStepConfig {
                eps_low: 0.2,
                eps_high: 0.28,
                kl_weight: r.random_range(0.0..0.5),
                entropy_weight: r.random_range(0.0..0.5),
            };
            let f = |p: &PolicyParams| distill_objective_and_grad(table, p, &signal, &cfg).unwrap().0;
            let a = f(policy);
            policy_fd_error(policy, &a.grad, |p| f(p).objective)
        }
        "entropy" => {
            let a = entropy_regularizer(table, policy).unwrap();
            policy_fd_error(policy, &a.grad, |p| entropy_regularizer(table, p).unwrap().objective)
        }
        "kl_penalty" => {
            let a = kl_penalty(table, policy, old).unwrap();
            policy_fd_error(policy, &a.grad, |p| kl_penalty(table, p, old).unwrap().objective)
        }
        "positive_likelihood" => {
            let agg = CeAggregate::Mean;
            let a = positive_likelihood_loss_and_grad(table, policy, agg).unwrap();
            policy_fd_error(policy, &a.grad, |p| {
                positive_likelihood_loss_and_grad(table, p, agg).unwrap().objective
            })
        }
        other => panic!("unknown objective {other}"),
    }
}

/// Worst error of `name` over `instances` seeds.
pub fn worst_error(name: &str, instances: u64) -> f64 {
    (0..instances).map(|s| objective_error(name, s)).fold(0.0, f64::max)
}
