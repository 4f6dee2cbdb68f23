//! Shared builders for integration tests.

#![allow(dead_code)]

use dgpo::credit::{AdvantageConfig, GateConfig};
use dgpo::objective::{policy_gradient, PreparedGroup, SurrogateConfig, Variant};
use dgpo::policy::{
    finite_diff_gradient, l2_norm, Architecture, PolicyModel, Sequence, TokenDistribution, TokenId, Vocab,
};
use dgpo::rollout::{RolloutGroup, RolloutSequence};
use dgpo::tasks::{FamilyKind, TaskInstance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn dummy_instance() -> TaskInstance {
    TaskInstance {
        family: FamilyKind::ModularChain,
        base: 2,
        difficulty: 1,
        prompt: vec![],
        answer: vec![],
        ground_truth: vec![],
    }
}

/// Random distribution over `v` tokens; with `sparse`, some entries are zero.
pub fn random_dist(rng: &mut ChaCha8Rng, v: usize, sparse: bool) -> Vec<f64> {
    loop {
        let mut p: Vec<f64> = (0..v)
            .map(|_| {
                if sparse && rng.gen_bool(0.3) {
                    0.0
                } else {
                    // heavy-tailed so some entries are tiny
                    rng.gen::<f64>().powi(rng.gen_range(1..6))
                }
            })
            .collect();
        let z: f64 = p.iter().sum();
        if z > 0.0 {
            p.iter_mut().for_each(|x| *x /= z);
            return p;
        }
    }
}

pub fn random_model(rng: &mut ChaCha8Rng) -> PolicyModel {
    let v: u32 = rng.gen_range(3..=8);
    let vocab = Vocab::new(v, v - 1, v - 1).unwrap();
    let window = rng.gen_range(1..=3);
    let arch = if rng.gen_bool(0.3) {
        Architecture::Tabular {
            buckets: rng.gen_range(1..=4),
        }
    } else {
        Architecture::Mlp {
            embed_dim: rng.gen_range(2..=3),
            hidden: rng.gen_range(3..=6),
        }
    };
    let scale = rng.gen_range(0.3..1.0);
    PolicyModel::init(arch, vocab, window, rng.gen(), scale).unwrap()
}

/// A random batch recorded against `model` whose old log-probs are perturbed
/// so ratios spread around 1 while staying clear of the clip boundaries.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    model: &PolicyModel,
    clip_eps: f64,
    gate: GateConfig,
    variant: Variant,
) -> Vec<PreparedGroup> {
    let v = model.vocab().size();
    let groups = rng.gen_range(1..=2);
    (0..groups)
        .map(|_| {
            let g = rng.gen_range(2..=4);
            let seqs = (0..g)
                .map(|_| {
                    let prompt: Vec<TokenId> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(0..v as u32)).collect();
                    let response: Vec<TokenId> =
                        (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..v as u32)).collect();
                    let seq = Sequence::new(prompt, response);
                    let current = model.sequence_log_probs(&seq).unwrap();
                    let old: Vec<f64> = current
                        .iter()
                        .map(|&lp| loop {
                            let old = lp + rng.gen_range(-0.35..0.35);
                            let ratio = (lp - old).exp();
                            if (ratio - (1.0 - clip_eps)).abs() > 1e-3 && (ratio - (1.0 + clip_eps)).abs() > 1e-3 {
                                break old;
                            }
                        })
                        .collect();
                    let old_dists = (0..seq.len())
                        .map(|t| {
                            TokenDistribution::from_log_probs(
                                &model.log_probs(&seq.prompt, &seq.response[..t]).unwrap(),
                            )
                        })
                        .collect();
                    let ref_dists = (0..seq.len())
                        .map(|_| {
                            let mut q = random_dist(rng, v, false);
                            q.iter_mut().for_each(|x| *x = 0.9 * *x + 0.1 / v as f64);
                            TokenDistribution::new(q).unwrap()
                        })
                        .collect();
                    RolloutSequence::new(seq, old, old_dists, ref_dists, rng.gen()).unwrap()
                })
                .collect();
            let group = RolloutGroup::new(dummy_instance(), seqs).unwrap();
            PreparedGroup::new(group, &variant.credit_mode(gate), &AdvantageConfig::default()).unwrap()
        })
        .collect()
}

pub fn surrogate_for(variant: Variant) -> SurrogateConfig {
    SurrogateConfig {
        clip_eps: 0.2,
        kl_beta: if variant.kl_penalized() { 0.1 } else { 0.0 },
        variant,
        ..SurrogateConfig::default()
    }
}

/// Relative error between the analytic gradient and central differences,
/// or `None` when both norms are below `1e-8`.
pub fn gradient_error(model: &PolicyModel, batch: &[PreparedGroup], cfg: &SurrogateConfig) -> Option<f64> {
    let analytic = policy_gradient(model, batch, cfg).unwrap().gradient;
    let numeric = finite_diff_gradient(model, |m| policy_gradient(m, batch, cfg).map(|r| r.loss), FD_STEP).unwrap();
    let scale = l2_norm(&analytic).max(l2_norm(&numeric));
    if scale <= 1e-8 {
        return None;
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    Some(l2_norm(&diff) / scale)
}
