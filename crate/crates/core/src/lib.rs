//! Thompson sampling agents that learn the task prior across a sequence of
//! bandit tasks, with environments, regret-bound evaluators and a seeded
//! experiment harness.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod bounds;
pub mod cli;
pub mod gauss_core;
pub mod harness;
pub mod hierarchy;
