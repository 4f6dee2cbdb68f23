//! Distribution comparisons and entropy.
//!
//! The squared Hellinger distance is the deviation signal used for credit
//! reallocation. It is bounded in `[0, 1]` for any pair of distributions,
//! unlike the reverse KL divergence, which grows without bound as the
//! reference mass on the policy's support goes to zero.

use crate::policy::TokenDistribution;
use crate::{Error, Result};

/// Default probability floor applied to the reference side of the reverse KL.
pub const DEFAULT_KL_FLOOR: f64 = 1e-30;

/// Squared Hellinger distance, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DeviationScore(f64);

impl DeviationScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyValue {
    /// Shannon entropy in nats.
    pub raw: f64,
    /// `raw / ln |V|`, in `[0, 1]`.
    pub normalized: f64,
}

fn same_vocab(p: &TokenDistribution, q: &TokenDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Input(format!(
            "distributions over different vocabularies ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

pub(crate) fn bhattacharyya_probs(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum()
}

pub(crate) fn hellinger_probs(p: &[f64], q: &[f64]) -> f64 {
    (1.0 - bhattacharyya_probs(p, q)).clamp(0.0, 1.0)
}

pub(crate) fn reverse_kl_probs(p: &[f64], q: &[f64], floor: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max(floor).ln()))
        .sum::<f64>()
        .max(0.0)
}

pub(crate) fn entropy_probs(p: &[f64]) -> EntropyValue {
    let raw = -p.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>();
    let raw = raw.max(0.0);
    let normalized = if p.len() > 1 {
        (raw / (p.len() as f64).ln()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    EntropyValue { raw, normalized }
}

/// `1 - sum_a sqrt(p_a q_a)`, clamped into `[0, 1]`.
pub fn squared_hellinger(p: &TokenDistribution, q: &TokenDistribution) -> Result<DeviationScore> {
    same_vocab(p, q)?;
    Ok(DeviationScore(hellinger_probs(p.probs(), q.probs())))
}

/// Bhattacharyya coefficient `sum_a sqrt(p_a q_a)`.
pub fn bhattacharyya(p: &TokenDistribution, q: &TokenDistribution) -> Result<f64> {
    same_vocab(p, q)?;
    Ok(bhattacharyya_probs(p.probs(), q.probs()))
}

/// `KL(p || q)` with `q` clamped from below at `floor`.
///
/// A `floor` of zero leaves `q` unclamped, in which case the result is
/// `+inf` whenever `q` has a zero where `p` does not.
pub fn reverse_kl(p: &TokenDistribution, q: &TokenDistribution, floor: f64) -> Result<f64> {
    same_vocab(p, q)?;
    if floor < 0.0 || floor.is_nan() {
        return Err(Error::Input(format!("KL floor must be >= 0, got {floor}")));
    }
    Ok(reverse_kl_probs(p.probs(), q.probs(), floor))
}

pub fn shannon_entropy(p: &TokenDistribution) -> EntropyValue {
    entropy_probs(p.probs())
}
