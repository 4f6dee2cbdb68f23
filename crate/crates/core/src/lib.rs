//! A desk-scale laboratory for distribution-guided, critic-free policy
//! optimization.
//!
//! Small autoregressive categorical policies ([`policy`]) are trained on
//! rule-verifiable sequence tasks ([`tasks`]) with group-relative advantages
//! that are redistributed across tokens ([`credit`]) by a bounded deviation
//! signal ([`divergence`]): the squared Hellinger distance to a frozen
//! reference policy, gated by the policy's normalized entropy. The clipped
//! surrogate and its baselines live in [`objective`]; the RL loop, evaluation
//! and ablation sweeps live in [`trainer`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod credit;
pub mod divergence;
mod error;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod tasks;
pub mod trainer;

pub use error::{ConfigIssue, Error, Result};
