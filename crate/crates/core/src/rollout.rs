//! Rollout groups: `G` responses sampled for one prompt from a frozen policy
//! snapshot, with the per-step distributions of the snapshot and of the
//! reference policy cached alongside the verified reward.

use crate::policy::{PolicyModel, Sequence, TokenDistribution};
use crate::tasks::TaskInstance;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct RolloutSequence {
    pub sequence: Sequence,
    /// `log pi_old(y_t | context)` at sampling time.
    pub old_log_probs: Vec<f64>,
    /// `pi_old(. | context)` at every step.
    pub old_dists: Vec<TokenDistribution>,
    /// `pi_ref(. | context)` at every step.
    pub ref_dists: Vec<TokenDistribution>,
    pub reward: f64,
}

impl RolloutSequence {
    pub fn new(
        sequence: Sequence,
        old_log_probs: Vec<f64>,
        old_dists: Vec<TokenDistribution>,
        ref_dists: Vec<TokenDistribution>,
        reward: f64,
    ) -> Result<Self> {
        let t = sequence.len();
        if t == 0 {
            return Err(Error::Input("rollout sequence has no response tokens".into()));
        }
        if old_log_probs.len() != t || old_dists.len() != t || ref_dists.len() != t {
            return Err(Error::Input(format!(
                "rollout of length {t} has {} log-probs, {} policy and {} reference distributions",
                old_log_probs.len(),
                old_dists.len(),
                ref_dists.len()
            )));
        }
        if let Some(step) = old_dists.iter().zip(&ref_dists).position(|(p, q)| p.len() != q.len()) {
            return Err(Error::Input(format!("vocabulary mismatch at step {step}")));
        }
        if !reward.is_finite() {
            return Err(Error::Input(format!("non-finite reward {reward}")));
        }
        Ok(Self {
            sequence,
            old_log_probs,
            old_dists,
            ref_dists,
            reward,
        })
    }

    /// Record a sequence against a snapshot and a reference model.
    pub fn record(snapshot: &PolicyModel, reference: &PolicyModel, sequence: Sequence, reward: f64) -> Result<Self> {
        let mut old_log_probs = Vec::with_capacity(sequence.len());
        let mut old_dists = Vec::with_capacity(sequence.len());
        let mut ref_dists = Vec::with_capacity(sequence.len());
        for t in 0..sequence.len() {
            let prefix = &sequence.response[..t];
            let lp = snapshot.log_probs(&sequence.prompt, prefix)?;
            old_log_probs.push(lp[sequence.response[t] as usize]);
            old_dists.push(TokenDistribution::from_log_probs(&lp));
            ref_dists.push(TokenDistribution::from_log_probs(
                &reference.log_probs(&sequence.prompt, prefix)?,
            ));
        }
        Self::new(sequence, old_log_probs, old_dists, ref_dists, reward)
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    pub sequences: Vec<RolloutSequence>,
}

impl RolloutGroup {
    pub fn new(instance: TaskInstance, sequences: Vec<RolloutSequence>) -> Result<Self> {
        if sequences.len() < 2 {
            return Err(Error::Input(format!(
                "a rollout group needs at least 2 sequences, got {}",
                sequences.len()
            )));
        }
        Ok(Self { instance, sequences })
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.sequences.iter().map(|s| s.reward).collect()
    }

    pub fn group_size(&self) -> usize {
        self.sequences.len()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(RolloutSequence::len).sum()
    }
}
