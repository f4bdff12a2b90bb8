//! Process-reward-guided step-level RL for computer-use agents, at desk
//! scale: a synthetic web environment, a log-linear policy over enumerated
//! actions, step-level graders and a GRPO optimizer, wired into a
//! two-stage collect/optimize loop.

pub mod action;
pub mod commands;
pub mod error;
pub mod exec;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod seeding;
pub mod synthweb;
pub mod trajectory;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
