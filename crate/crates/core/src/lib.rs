//! Two-stage policy optimization lab on toy token-sequence tasks.
//!
//! Stage 1 trains a teacher with many off-policy updates on one fixed batch of
//! rollouts. Stage 2 distills per-token log-ratio signals from that teacher back
//! into the base policy under a clipped, trust-region style surrogate.
//!
//! Modules:
//! - [`policy`]: one-hidden-layer softmax policy with analytic gradients.
//! - [`env`]: verifiable toy tasks, rollout collection and AVG@K evaluation.
//! - [`losses`]: GRPO, PPO, SAPO-style, CE and MSE teacher objectives.
//! - [`distill`]: token signal construction and the distillation surrogate.
//! - [`metrics`]: drift diagnostics and the metrics CSV.
//! - [`harness`]: config-driven orchestration and the CLI.

pub mod distill;
pub mod env;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod policy;

pub use error::{Error, Result};
