//! Token-level credit assignment.
//!
//! A sequence's group-relative advantage `A_i` is spread over its `T_i`
//! tokens with weights
//!
//! ```text
//! s_t = d_t * H_t^kappa
//! w_t = T_i * softmax_t(s / tau)
//! A_{i,t} = A_i * w_t
//! ```
//!
//! where `d_t` is the squared Hellinger distance between the sampling policy
//! and the reference at step `t`, and `H_t` is the sampling policy's
//! normalized entropy there. The weights have unit mean, so the sequence's
//! total credit `A_i * T_i` is unchanged and every token keeps the sign of
//! `A_i`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::divergence::{entropy_probs, hellinger_probs, reverse_kl_probs, DEFAULT_KL_FLOOR};
use crate::policy::{TokenDistribution, TokenId};
use crate::rollout::RolloutGroup;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdEstimator {
    /// Divide by `G`.
    #[default]
    Population,
    /// Divide by `G - 1`.
    Sample,
}

/// Verifier rewards for one group, plus the stabilizer added to the
/// standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRewards {
    rewards: Vec<f64>,
    epsilon: f64,
}

impl GroupRewards {
    pub fn new(rewards: Vec<f64>, epsilon: f64) -> Result<Self> {
        if rewards.len() < 2 {
            return Err(Error::Input(format!("group needs >= 2 rewards, got {}", rewards.len())));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Input("non-finite reward in group".into()));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Input(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self { rewards, epsilon })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

/// Z-scored rewards with the population standard deviation.
pub fn group_advantage(rewards: &GroupRewards) -> Vec<f64> {
    group_advantage_with(rewards, StdEstimator::Population)
}

/// `A_i = (r_i - mean) / (std + eps)`. A group with identical rewards gets
/// all-zero advantages, whatever `eps` is.
pub fn group_advantage_with(rewards: &GroupRewards, estimator: StdEstimator) -> Vec<f64> {
    let r = &rewards.rewards;
    let g = r.len() as f64;
    let mean = r.iter().sum::<f64>() / g;
    let ss: f64 = r.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = match estimator {
        StdEstimator::Population => g,
        StdEstimator::Sample => g - 1.0,
    };
    let std = (ss / denom).sqrt();
    if std == 0.0 {
        return vec![0.0; r.len()];
    }
    r.iter().map(|x| (x - mean) / (std + rewards.epsilon)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMetric {
    #[default]
    Hellinger,
    /// `KL / (1 + KL)` of the reverse KL, squashed into `[0, 1)`.
    ReverseKlNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub kappa: f64,
    pub tau: f64,
    pub metric: DeviationMetric,
    /// Floor on reference probabilities when `metric` is the reverse KL.
    pub kl_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            tau: 1.0,
            metric: DeviationMetric::Hellinger,
            kl_floor: DEFAULT_KL_FLOOR,
        }
    }
}

impl GateConfig {
    pub fn new(kappa: f64, tau: f64, metric: DeviationMetric) -> Result<Self> {
        let cfg = Self {
            kappa,
            tau,
            metric,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Input(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Input(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// How sequence advantages are turned into token advantages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CreditMode {
    /// Every token receives `A_i`.
    Uniform,
    /// Entropy-gated deviation weights.
    Gated(GateConfig),
}

/// Per-step deviation between the sampling policy and the reference.
pub fn deviation(
    metric: DeviationMetric,
    policy: &TokenDistribution,
    reference: &TokenDistribution,
    kl_floor: f64,
) -> f64 {
    match metric {
        DeviationMetric::Hellinger => hellinger_probs(policy.probs(), reference.probs()),
        DeviationMetric::ReverseKlNormalized => {
            let kl = reverse_kl_probs(policy.probs(), reference.probs(), kl_floor);
            if kl.is_finite() {
                kl / (1.0 + kl)
            } else {
                1.0
            }
        }
    }
}

/// `s_t = d_t * H_t^kappa`, with `0^0 = 1`.
pub fn gated_scores(deviations: &[f64], entropies: &[f64], kappa: f64) -> Result<Vec<f64>> {
    if deviations.len() != entropies.len() {
        return Err(Error::Input(format!(
            "{} deviations but {} entropies",
            deviations.len(),
            entropies.len()
        )));
    }
    Ok(deviations
        .iter()
        .zip(entropies)
        .map(|(d, h)| if kappa == 0.0 { *d } else { d * h.powf(kappa) })
        .collect())
}

/// `w_t = T * softmax_t(s / tau)`, computed with the max score subtracted.
pub fn reallocation_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input("cannot weight an empty sequence".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("tau must be > 0, got {tau}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let scale = scores.len() as f64 / exps.iter().sum::<f64>();
    Ok(exps.into_iter().map(|e| e * scale).collect())
}

/// Credit assigned to one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditMap {
    pub deviations: Vec<f64>,
    pub entropies: Vec<f64>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// `A_{i,t} = A_i * w_t`.
    pub advantages: Vec<f64>,
    /// `A_i`.
    pub sequence_advantage: f64,
}

impl CreditMap {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Credit for one sequence from its per-step deviations and normalized
    /// entropies.
    pub fn from_signals(
        sequence_advantage: f64,
        deviations: Vec<f64>,
        entropies: Vec<f64>,
        mode: &CreditMode,
    ) -> Result<Self> {
        let (scores, weights) = match mode {
            CreditMode::Uniform => (vec![0.0; deviations.len()], vec![1.0; deviations.len()]),
            CreditMode::Gated(gate) => {
                gate.validate()?;
                let scores = gated_scores(&deviations, &entropies, gate.kappa)?;
                let weights = reallocation_weights(&scores, gate.tau)?;
                (scores, weights)
            }
        };
        if deviations.len() != entropies.len() {
            return Err(Error::Input("deviation and entropy lengths differ".into()));
        }
        let advantages = weights.iter().map(|w| sequence_advantage * w).collect();
        Ok(Self {
            deviations,
            entropies,
            scores,
            weights,
            advantages,
            sequence_advantage,
        })
    }
}

/// Advantage normalization settings shared by every variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageConfig {
    pub epsilon: f64,
    pub estimator: StdEstimator,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            estimator: StdEstimator::Population,
        }
    }
}

/// Group advantage, per-step signals, scores, weights and token advantages
/// for every sequence in a group.
pub fn build_credit_map(group: &RolloutGroup, mode: &CreditMode, adv: &AdvantageConfig) -> Result<Vec<CreditMap>> {
    let rewards = GroupRewards::new(group.rewards(), adv.epsilon)?;
    let advantages = group_advantage_with(&rewards, adv.estimator);
    let (metric, floor) = match mode {
        CreditMode::Gated(g) => (g.metric, g.kl_floor),
        CreditMode::Uniform => (DeviationMetric::Hellinger, DEFAULT_KL_FLOOR),
    };
    group
        .sequences
        .iter()
        .zip(advantages)
        .map(|(seq, a)| {
            let deviations = seq
                .old_dists
                .iter()
                .zip(&seq.ref_dists)
                .map(|(p, q)| deviation(metric, p, q, floor))
                .collect();
            let entropies = seq
                .old_dists
                .iter()
                .map(|p| entropy_probs(p.probs()).normalized)
                .collect();
            CreditMap::from_signals(a, deviations, entropies, mode)
        })
        .collect()
}

/// One exported line per sequence, for external weight heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreditRecord {
    pub group: usize,
    pub sequence: usize,
    pub prompt_tokens: Vec<TokenId>,
    pub response_tokens: Vec<TokenId>,
    pub reward: f64,
    pub sequence_advantage: f64,
    pub d: Vec<f64>,
    pub entropy: Vec<f64>,
    pub s: Vec<f64>,
    pub w: Vec<f64>,
    pub advantage: Vec<f64>,
}

pub fn credit_records(group_index: usize, group: &RolloutGroup, credit: &[CreditMap]) -> Vec<CreditRecord> {
    group
        .sequences
        .iter()
        .zip(credit)
        .enumerate()
        .map(|(i, (seq, c))| CreditRecord {
            group: group_index,
            sequence: i,
            prompt_tokens: seq.sequence.prompt.clone(),
            response_tokens: seq.sequence.response.clone(),
            reward: seq.reward,
            sequence_advantage: c.sequence_advantage,
            d: c.deviations.clone(),
            entropy: c.entropies.clone(),
            s: c.scores.clone(),
            w: c.weights.clone(),
            advantage: c.advantages.clone(),
        })
        .collect()
}

pub fn write_credit_jsonl<W: Write>(mut out: W, records: &[CreditRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_credit_jsonl(text: &str) -> Result<Vec<CreditRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("line {}: {e}", n + 1))))
        .collect()
}
