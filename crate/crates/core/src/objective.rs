//! Surrogate objectives and their exact gradients.
//!
//! The distribution-guided objective is
//!
//! ```text
//! J = 1/G sum_i 1/T_i sum_t min(rho_{i,t} A_{i,t}, clip(rho_{i,t}, 1-eps, 1+eps) A_{i,t})
//! ```
//!
//! with token advantages `A_{i,t}` from [`crate::credit`]. No KL term
//! appears: the reference policy only enters through the credit weights,
//! which are fixed at collection time. The KL-penalized baseline subtracts
//! `beta * KL(pi_theta || pi_ref)` per token under the same reduction.
//!
//! Trainers minimize `loss = -J`. Where the `min` selects the clipped
//! branch, the term is constant in `theta` and contributes no gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{build_credit_map, AdvantageConfig, CreditMap, CreditMode, GateConfig};
use crate::divergence::{hellinger_probs, DEFAULT_KL_FLOOR};
use crate::policy::{l2_norm, score_direction, PolicyModel, Sequence, TokenDistribution, TokenId};
use crate::rollout::{RolloutGroup, RolloutSequence};
use crate::tasks::TaskInstance;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Dgpo,
    GrpoUniform,
    GrpoKlPenalized,
    DgpoNoGate,
    DgpoReverseKl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Dgpo,
        Variant::GrpoUniform,
        Variant::GrpoKlPenalized,
        Variant::DgpoNoGate,
        Variant::DgpoReverseKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dgpo => "dgpo",
            Variant::GrpoUniform => "grpo_uniform",
            Variant::GrpoKlPenalized => "grpo_kl_penalized",
            Variant::DgpoNoGate => "dgpo_no_gate",
            Variant::DgpoReverseKl => "dgpo_reverse_kl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Credit assignment the variant trains with, given the configured gate.
    pub fn credit_mode(self, gate: GateConfig) -> CreditMode {
        match self {
            Variant::Dgpo => CreditMode::Gated(gate),
            Variant::DgpoNoGate => CreditMode::Gated(GateConfig { kappa: 0.0, ..gate }),
            Variant::DgpoReverseKl => CreditMode::Gated(GateConfig {
                metric: crate::credit::DeviationMetric::ReverseKlNormalized,
                ..gate
            }),
            Variant::GrpoUniform | Variant::GrpoKlPenalized => CreditMode::Uniform,
        }
    }

    pub fn kl_penalized(self) -> bool {
        self == Variant::GrpoKlPenalized
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Floor on reference probabilities inside the KL penalty. Zero means
    /// unfloored, which makes the penalty undefined wherever the reference
    /// assigns zero mass to a token the policy can emit.
    pub kl_floor: f64,
    pub variant: Variant,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            kl_beta: 0.0,
            kl_floor: DEFAULT_KL_FLOOR,
            variant: Variant::Dgpo,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Input(format!(
                "clip epsilon must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(Error::Input(format!("kl beta must be >= 0, got {}", self.kl_beta)));
        }
        if !(self.kl_floor >= 0.0) {
            return Err(Error::Input(format!("kl floor must be >= 0, got {}", self.kl_floor)));
        }
        Ok(())
    }
}

/// Per-token `pi_theta / pi_old`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRatios(pub Vec<Vec<f64>>);

impl ImportanceRatios {
    pub fn from_log_probs(current: &[Vec<f64>], old: &[Vec<f64>]) -> Result<Self> {
        if current.len() != old.len() {
            return Err(Error::Input("ratio inputs have different sequence counts".into()));
        }
        current
            .iter()
            .zip(old)
            .map(|(c, o)| {
                if c.len() != o.len() {
                    return Err(Error::Input("ratio inputs have different token counts".into()));
                }
                Ok(c.iter().zip(o).map(|(a, b)| (a - b).exp()).collect())
            })
            .collect::<Result<_>>()
            .map(Self)
    }

    /// All ones, the state right after a snapshot.
    pub fn ones(lengths: impl IntoIterator<Item = usize>) -> Self {
        Self(lengths.into_iter().map(|t| vec![1.0; t]).collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// `-J`, the value trainers minimize.
    pub loss: f64,
    /// `J` itself.
    pub objective: f64,
    /// `min(rho A, clip(rho) A)` per token.
    pub surrogate_terms: Vec<Vec<f64>>,
    /// `KL(pi_theta || pi_ref)` per token; empty for variants without a penalty.
    pub kl_terms: Vec<Vec<f64>>,
    pub clipped_fraction: f64,
    /// Gradient of `loss`; empty when no model was involved.
    pub gradient: Vec<f64>,
    pub gradient_norm: f64,
    pub token_count: usize,
}

/// Clipped surrogate term and whether the clipped branch is the active one.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

struct SurrogatePart {
    objective: f64,
    terms: Vec<Vec<f64>>,
    /// `dJ / d log pi(y_{i,t})`
    coeffs: Vec<Vec<f64>>,
    clipped: usize,
    tokens: usize,
}

fn check_aligned(ratios: &ImportanceRatios, credit: &[CreditMap]) -> Result<()> {
    if ratios.0.len() != credit.len() {
        return Err(Error::Input(format!(
            "{} ratio rows but {} credit maps",
            ratios.0.len(),
            credit.len()
        )));
    }
    for (i, (r, c)) in ratios.0.iter().zip(credit).enumerate() {
        if r.len() != c.len() || c.is_empty() {
            return Err(Error::Input(format!(
                "sequence {i}: {} ratios for {} credited tokens",
                r.len(),
                c.len()
            )));
        }
    }
    Ok(())
}

fn surrogate(ratios: &ImportanceRatios, credit: &[CreditMap], clip_eps: f64) -> SurrogatePart {
    let n = credit.len() as f64;
    let mut objective = 0.0;
    let mut clipped = 0;
    let mut tokens = 0;
    let mut terms = Vec::with_capacity(credit.len());
    let mut coeffs = Vec::with_capacity(credit.len());
    for (rho, c) in ratios.0.iter().zip(credit) {
        let t_len = c.len() as f64;
        let mut seq_terms = Vec::with_capacity(c.len());
        let mut seq_coeffs = Vec::with_capacity(c.len());
        for (&r, &a) in rho.iter().zip(&c.advantages) {
            let (term, is_clipped) = clipped_term(r, a, clip_eps);
            clipped += usize::from(is_clipped);
            seq_terms.push(term);
            // d(rho A)/d log pi = rho A
            seq_coeffs.push(if is_clipped { 0.0 } else { r * a / (n * t_len) });
        }
        objective += seq_terms.iter().sum::<f64>() / t_len;
        tokens += c.len();
        terms.push(seq_terms);
        coeffs.push(seq_coeffs);
    }
    SurrogatePart {
        objective: objective / n,
        terms,
        coeffs,
        clipped,
        tokens,
    }
}

/// The distribution-guided clipped surrogate, from ratios and credit alone.
pub fn dgpo_loss(ratios: &ImportanceRatios, credit: &[CreditMap], cfg: &SurrogateConfig) -> Result<LossReport> {
    cfg.validate()?;
    check_aligned(ratios, credit)?;
    let part = surrogate(ratios, credit, cfg.clip_eps);
    Ok(LossReport {
        loss: -part.objective,
        objective: part.objective,
        surrogate_terms: part.terms,
        kl_terms: Vec::new(),
        clipped_fraction: part.clipped as f64 / part.tokens as f64,
        gradient: Vec::new(),
        gradient_norm: 0.0,
        token_count: part.tokens,
    })
}

fn kl_to_reference(log_probs: &[f64], reference: &TokenDistribution, floor: f64) -> f64 {
    log_probs
        .iter()
        .zip(reference.probs())
        .map(|(&lp, &q)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - q.max(floor).ln())
            }
        })
        .sum()
}

/// `dKL/dlogit_j = pi_j (log pi_j - log q_j - KL)`.
fn kl_logit_gradient(log_probs: &[f64], reference: &TokenDistribution, floor: f64, kl: f64) -> Vec<f64> {
    log_probs
        .iter()
        .zip(reference.probs())
        .map(|(&lp, &q)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - q.max(floor).ln() - kl)
            }
        })
        .collect()
}

/// The KL-penalized baseline: the clipped surrogate with the sequence
/// advantage on every token, minus `beta * KL(pi_theta || pi_ref)` per token,
/// mean-reduced over tokens and then sequences.
pub fn kl_penalized_loss(
    ratios: &ImportanceRatios,
    advantages: &[f64],
    policy: &[Vec<TokenDistribution>],
    reference: &[Vec<TokenDistribution>],
    cfg: &SurrogateConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    if advantages.len() != ratios.0.len() || policy.len() != ratios.0.len() || reference.len() != ratios.0.len() {
        return Err(Error::Input(
            "kl-penalized loss inputs have different sequence counts".into(),
        ));
    }
    let credit: Vec<CreditMap> = ratios
        .0
        .iter()
        .zip(advantages)
        .map(|(r, &a)| CreditMap::from_signals(a, vec![0.0; r.len()], vec![0.0; r.len()], &CreditMode::Uniform))
        .collect::<Result<_>>()?;
    check_aligned(ratios, &credit)?;
    let part = surrogate(ratios, &credit, cfg.clip_eps);
    let n = credit.len() as f64;
    let mut penalty = 0.0;
    let mut kl_terms = Vec::with_capacity(credit.len());
    for (i, (p_seq, q_seq)) in policy.iter().zip(reference).enumerate() {
        if p_seq.len() != credit[i].len() || q_seq.len() != credit[i].len() {
            return Err(Error::Input(format!("sequence {i}: distribution count mismatch")));
        }
        let kls: Vec<f64> = p_seq
            .iter()
            .zip(q_seq)
            .map(|(p, q)| {
                let lp: Vec<f64> = p.probs().iter().map(|x| x.ln()).collect();
                kl_to_reference(&lp, q, cfg.kl_floor)
            })
            .collect();
        if let Some(t) = kls.iter().position(|k| !k.is_finite()) {
            return Err(Error::Numeric(format!(
                "KL penalty undefined at sequence {i}, token {t}: reference assigns zero mass where the policy does not"
            )));
        }
        penalty += kls.iter().sum::<f64>() / kls.len() as f64;
        kl_terms.push(kls);
    }
    let objective = part.objective - cfg.kl_beta * penalty / n;
    Ok(LossReport {
        loss: -objective,
        objective,
        surrogate_terms: part.terms,
        kl_terms,
        clipped_fraction: part.clipped as f64 / part.tokens as f64,
        gradient: Vec::new(),
        gradient_norm: 0.0,
        token_count: part.tokens,
    })
}

/// A rollout group with its credit assignment fixed at collection time.
#[derive(Clone, Debug)]
pub struct PreparedGroup {
    pub rollout: RolloutGroup,
    pub credit: Vec<CreditMap>,
}

impl PreparedGroup {
    pub fn new(rollout: RolloutGroup, mode: &CreditMode, adv: &AdvantageConfig) -> Result<Self> {
        let credit = build_credit_map(&rollout, mode, adv)?;
        Ok(Self { rollout, credit })
    }
}

struct SequenceEval {
    log_probs: Vec<f64>,
    kl: Vec<f64>,
    grad: Vec<f64>,
}

/// Loss and exact gradient of the configured variant on a batch of groups.
///
/// Each group contributes `1/G sum_i` over its sequences; groups are then
/// averaged, which equals one flat average over sequences when every group
/// has the same size.
pub fn policy_gradient(model: &PolicyModel, batch: &[PreparedGroup], cfg: &SurrogateConfig) -> Result<LossReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let seqs: Vec<(&RolloutSequence, &CreditMap)> = batch
        .iter()
        .flat_map(|g| g.rollout.sequences.iter().zip(&g.credit))
        .collect();
    if batch.iter().any(|g| g.rollout.sequences.len() != g.credit.len()) {
        return Err(Error::Input("credit map count differs from group size".into()));
    }
    let n = seqs.len() as f64;
    let kl_on = cfg.variant.kl_penalized();
    let kl_scale = cfg.kl_beta / n;

    // Pass 1: current log-probs (and KL terms), in parallel per sequence.
    // Pass 2 needs the surrogate coefficients, which depend on them.
    let evals: Vec<Result<SequenceEval>> = seqs
        .par_iter()
        .enumerate()
        .map(|(i, (rs, credit))| {
            let seq = &rs.sequence;
            if credit.len() != seq.len() {
                return Err(Error::Input(format!("sequence {i}: credit length {} != {}", credit.len(), seq.len())));
            }
            let mut grad = vec![0.0; model.param_count()];
            let mut log_probs = Vec::with_capacity(seq.len());
            let mut kl = Vec::new();
            let t_len = seq.len() as f64;
            let mut acts = Vec::with_capacity(seq.len());
            for t in 0..seq.len() {
                let act = model.activations(model.window(&seq.prompt, &seq.response[..t])?);
                let lp = act.log_probs()[seq.response[t] as usize];
                if !lp.is_finite() {
                    return Err(Error::Numeric(format!("non-finite log-prob at sequence {i}, token {t}")));
                }
                log_probs.push(lp);
                if kl_on {
                    let k = kl_to_reference(act.log_probs(), &rs.ref_dists[t], cfg.kl_floor);
                    if !k.is_finite() {
                        return Err(Error::Numeric(format!(
                            "KL penalty undefined at sequence {i}, token {t}: reference assigns zero mass where the policy does not"
                        )));
                    }
                    let dkl = kl_logit_gradient(act.log_probs(), &rs.ref_dists[t], cfg.kl_floor, k);
                    // objective gets -beta/N * 1/T * KL
                    let scale = -kl_scale / t_len;
                    let d: Vec<f64> = dkl.iter().map(|x| scale * x).collect();
                    model.backward(&act, &d, &mut grad);
                    kl.push(k);
                }
                acts.push(act);
            }
            // Surrogate coefficients only need this sequence's ratios.
            let ratios = ImportanceRatios::from_log_probs(std::slice::from_ref(&log_probs), std::slice::from_ref(&rs.old_log_probs))?;
            let part = surrogate(&ratios, std::slice::from_ref(*credit), cfg.clip_eps);
            for (t, act) in acts.iter().enumerate() {
                // part was computed with n = 1
                let c = part.coeffs[0][t] / n;
                if c != 0.0 {
                    let d = score_direction(act, seq.response[t], c);
                    model.backward(act, &d, &mut grad);
                }
            }
            Ok(SequenceEval { log_probs, kl, grad })
        })
        .collect();

    let mut current = Vec::with_capacity(seqs.len());
    let mut kl_terms = Vec::new();
    let mut gradient = vec![0.0; model.param_count()];
    // fixed summation order
    for e in evals {
        let e = e?;
        for (g, x) in gradient.iter_mut().zip(&e.grad) {
            *g += x;
        }
        current.push(e.log_probs);
        if kl_on {
            kl_terms.push(e.kl);
        }
    }
    let old: Vec<Vec<f64>> = seqs.iter().map(|(rs, _)| rs.old_log_probs.clone()).collect();
    let ratios = ImportanceRatios::from_log_probs(&current, &old)?;
    let credit: Vec<CreditMap> = seqs.iter().map(|(_, c)| (*c).clone()).collect();
    let part = surrogate(&ratios, &credit, cfg.clip_eps);
    let penalty: f64 = kl_terms
        .iter()
        .map(|k| k.iter().sum::<f64>() / k.len() as f64)
        .sum::<f64>()
        / n;
    let objective = part.objective - if kl_on { cfg.kl_beta * penalty } else { 0.0 };

    // gradient above is of the objective; the loss is its negation
    gradient.iter_mut().for_each(|g| *g = -*g);
    if let Some(j) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {j}")));
    }
    let gradient_norm = l2_norm(&gradient);
    Ok(LossReport {
        loss: -objective,
        objective,
        surrogate_terms: part.terms,
        kl_terms,
        clipped_fraction: part.clipped as f64 / part.tokens as f64,
        gradient,
        gradient_norm,
        token_count: part.tokens,
    })
}

/// Fixed one-step scenario for comparing gradient norms as the reference
/// probability of an explored token goes to zero.
///
/// A single-bucket tabular policy puts `policy_prob` on token `a*` and
/// spreads the rest uniformly. Two sequences of `seq_len` tokens share a
/// pivotal step whose reference distribution puts `r` on `a*` and spreads
/// the rest uniformly; every other step has a reference equal to the
/// policy. The first sequence explores `a*` at the pivot and is rewarded.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub vocab_size: u32,
    pub seq_len: usize,
    pub pivot: usize,
    pub policy_prob: f64,
    pub kl_beta: f64,
    pub kl_floor: f64,
    pub clip_eps: f64,
    pub gate: GateConfig,
    pub ref_probs: Vec<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8,
            seq_len: 4,
            pivot: 1,
            policy_prob: 0.5,
            kl_beta: 0.1,
            kl_floor: DEFAULT_KL_FLOOR,
            clip_eps: 0.2,
            gate: GateConfig::default(),
            ref_probs: (2..=12).map(|k| 10f64.powi(-k)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub ref_prob: f64,
    /// Norm of the gradient of the KL penalty term alone.
    pub kl_grad_norm: f64,
    /// Norm of the distribution-guided loss gradient.
    pub dgpo_grad_norm: f64,
    pub w_max: f64,
    /// Deviation at the pivotal step.
    pub d_value: f64,
    /// Norm of the full KL-penalized loss gradient (surrogate plus penalty).
    pub kl_objective_grad_norm: f64,
}

const PROBE_STAR: TokenId = 0;
const PROBE_OTHER: TokenId = 1;

impl ProbeConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.seq_len < 2 || self.pivot >= self.seq_len {
            return Err(Error::Input(
                "probe needs vocab >= 3, seq_len >= 2, pivot < seq_len".into(),
            ));
        }
        if !(self.policy_prob > 0.0 && self.policy_prob < 1.0) {
            return Err(Error::Input("probe policy_prob must be in (0, 1)".into()));
        }
        if self.ref_probs.iter().any(|r| !(*r >= 0.0 && *r < 1.0)) {
            return Err(Error::Input("probe reference probabilities must be in [0, 1)".into()));
        }
        self.gate.validate()
    }

    fn model(&self) -> Result<PolicyModel> {
        let v = self.vocab_size as usize;
        let vocab = crate::policy::Vocab::new(self.vocab_size, self.vocab_size - 1, self.vocab_size - 1)?;
        // logits giving policy_prob on a* and uniform mass elsewhere
        let rest = (1.0 - self.policy_prob) / (v - 1) as f64;
        let mut params = vec![rest.ln(); v];
        params[PROBE_STAR as usize] = self.policy_prob.ln();
        PolicyModel::from_parts(crate::policy::Architecture::Tabular { buckets: 1 }, vocab, 1, params)
    }

    fn reference_at(&self, r: f64) -> Result<TokenDistribution> {
        let v = self.vocab_size as usize;
        let mut q = vec![(1.0 - r) / (v - 1) as f64; v];
        q[PROBE_STAR as usize] = r;
        TokenDistribution::new(q)
    }

    /// The rollout group for reference probability `r`.
    pub fn group(&self, r: f64) -> Result<(PolicyModel, RolloutGroup)> {
        self.validate()?;
        let model = self.model()?;
        let pi = model.forward(&[])?;
        let pivot_ref = self.reference_at(r)?;
        let make = |explore: bool, reward: f64| -> Result<RolloutSequence> {
            let response: Vec<TokenId> = (0..self.seq_len)
                .map(|t| {
                    if explore && t == self.pivot {
                        PROBE_STAR
                    } else {
                        PROBE_OTHER
                    }
                })
                .collect();
            let old_lp = response.iter().map(|&y| pi.prob(y).ln()).collect();
            let refs = (0..self.seq_len)
                .map(|t| if t == self.pivot { pivot_ref.clone() } else { pi.clone() })
                .collect();
            RolloutSequence::new(
                Sequence::new(vec![], response),
                old_lp,
                vec![pi.clone(); self.seq_len],
                refs,
                reward,
            )
        };
        let instance = TaskInstance {
            family: crate::tasks::FamilyKind::ModularChain,
            base: 2,
            difficulty: 1,
            prompt: vec![],
            answer: vec![],
            ground_truth: vec![],
        };
        let group = RolloutGroup::new(instance, vec![make(true, 1.0)?, make(false, 0.0)?])?;
        Ok((model, group))
    }
}

/// Sweep the reference probability of the explored token and report
/// gradient norms for the KL-penalized and distribution-guided objectives.
pub fn gradient_stability_probe(cfg: &ProbeConfig) -> Result<Vec<ProbeRow>> {
    cfg.validate()?;
    let adv = AdvantageConfig::default();
    cfg.ref_probs
        .iter()
        .map(|&r| {
            let (model, group) = cfg.group(r)?;
            let surrogate_cfg = |variant, kl_beta| SurrogateConfig {
                clip_eps: cfg.clip_eps,
                kl_beta,
                kl_floor: cfg.kl_floor,
                variant,
            };

            let dgpo = PreparedGroup::new(group.clone(), &Variant::Dgpo.credit_mode(cfg.gate), &adv)?;
            let dgpo_report = policy_gradient(&model, std::slice::from_ref(&dgpo), &surrogate_cfg(Variant::Dgpo, 0.0))?;

            let uniform = PreparedGroup::new(group.clone(), &CreditMode::Uniform, &adv)?;
            let full = policy_gradient(
                &model,
                std::slice::from_ref(&uniform),
                &surrogate_cfg(Variant::GrpoKlPenalized, cfg.kl_beta),
            )?;
            let surrogate_only = policy_gradient(
                &model,
                std::slice::from_ref(&uniform),
                &surrogate_cfg(Variant::GrpoKlPenalized, 0.0),
            )?;
            let penalty: Vec<f64> = full
                .gradient
                .iter()
                .zip(&surrogate_only.gradient)
                .map(|(a, b)| a - b)
                .collect();

            let pi = model.forward(&[])?;
            let d_value = hellinger_probs(pi.probs(), cfg.reference_at(r)?.probs());
            let w_max = dgpo
                .credit
                .iter()
                .flat_map(|c| c.weights.iter().copied())
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(ProbeRow {
                ref_prob: r,
                kl_grad_norm: l2_norm(&penalty),
                dgpo_grad_norm: dgpo_report.gradient_norm,
                w_max,
                d_value,
                kl_objective_grad_norm: full.gradient_norm,
            })
        })
        .collect()
}

pub const PROBE_CSV_HEADER: &str = "ref_prob,kl_grad_norm,dgpo_grad_norm,w_max,d_value";

pub fn write_probe_csv<W: std::io::Write>(out: W, rows: &[ProbeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(PROBE_CSV_HEADER.split(',')).map_err(io)?;
    for r in rows {
        w.write_record([
            format!("{:e}", r.ref_prob),
            r.kl_grad_norm.to_string(),
            r.dgpo_grad_norm.to_string(),
            r.w_max.to_string(),
            r.d_value.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Upper bound `max w * max |A| * max ||grad log pi||` on the
/// distribution-guided gradient norm at unit ratios.
pub fn dgpo_gradient_bound(model: &PolicyModel, batch: &[PreparedGroup]) -> Result<f64> {
    let mut max_w: f64 = 0.0;
    let mut max_a: f64 = 0.0;
    let mut max_score: f64 = 0.0;
    for g in batch {
        for (rs, c) in g.rollout.sequences.iter().zip(&g.credit) {
            max_a = max_a.max(c.sequence_advantage.abs());
            max_w = c.weights.iter().copied().fold(max_w, f64::max);
            for t in 0..rs.len() {
                let seq = &rs.sequence;
                let one = crate::policy::weighted_logprob_gradient(
                    model,
                    &[Sequence::new(seq.prompt.clone(), seq.response[..=t].to_vec())],
                    &[{
                        let mut c = vec![0.0; t + 1];
                        c[t] = 1.0;
                        c
                    }],
                )?;
                max_score = max_score.max(l2_norm(&one));
            }
        }
    }
    Ok(max_w * max_a * max_score)
}
