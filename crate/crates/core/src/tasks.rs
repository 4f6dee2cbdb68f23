//! Synthetic sequence tasks with rule-based, outcome-only rewards.
//!
//! All families share one 16-token vocabulary: digits `0..=9`, then
//! `PAD`, `BOS`, `SEP`, `ANS`, one unused operator slot, and `EOS`. A prompt
//! is `BOS x_1 .. x_n SEP`; a response ends with `ANS <answer> EOS`, and only
//! the answer span is checked.
//!
//! * `modular_chain`: prompt `BOS x_0 .. x_D SEP`, response
//!   `x_0 s_1 .. s_D ANS s_D EOS` with `s_t = (s_{t-1} + x_t) mod m`. Steps
//!   where the running sum wraps around the modulus are the pivotal ones.
//! * `copy_reverse`: response `ANS x_n .. x_1 EOS`.
//! * `sorted_emit`: response `ANS sort(x) EOS`.
//!
//! Whether an operand tuple belongs to the train or the eval split is a
//! fixed hash of the tuple, so the splits are disjoint for every seed.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::optim::{Optimizer, OptimizerConfig};
use crate::policy::{weighted_logprob_gradient, PolicyModel, Sequence, TokenId, Vocab};
use crate::seed::{self, Rng};
use crate::{Error, Result};

pub const VOCAB_SIZE: u32 = 16;
pub const PAD: TokenId = 10;
pub const BOS: TokenId = 11;
pub const SEP: TokenId = 12;
pub const ANS: TokenId = 13;
pub const EOS: TokenId = 15;
pub const MAX_BASE: u32 = 10;

/// One in `EVAL_BUCKETS` operand tuples is held out for evaluation.
const EVAL_BUCKETS: u64 = 5;

pub fn vocab() -> Vocab {
    Vocab::new(VOCAB_SIZE, EOS, PAD).expect("static vocab is valid")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    #[default]
    ModularChain,
    CopyReverse,
    SortedEmit,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::ModularChain => "modular_chain",
            FamilyKind::CopyReverse => "copy_reverse",
            FamilyKind::SortedEmit => "sorted_emit",
        }
    }

    fn tag(self) -> u64 {
        match self {
            FamilyKind::ModularChain => 1,
            FamilyKind::CopyReverse => 2,
            FamilyKind::SortedEmit => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// A task family: which rule, over which digit base, at which difficulty.
///
/// `difficulty` is the number of additions for `modular_chain` and the list
/// length for the other two families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub kind: FamilyKind,
    pub base: u32,
    pub difficulty: usize,
}

impl TaskFamily {
    pub fn new(kind: FamilyKind, base: u32, difficulty: usize) -> Result<Self> {
        if !(2..=MAX_BASE).contains(&base) {
            return Err(Error::Input(format!("base must be in 2..={MAX_BASE}, got {base}")));
        }
        if difficulty == 0 {
            return Err(Error::Input("difficulty must be >= 1".into()));
        }
        Ok(Self { kind, base, difficulty })
    }

    pub fn vocab(&self) -> Vocab {
        vocab()
    }

    fn operand_count(&self) -> usize {
        match self.kind {
            FamilyKind::ModularChain => self.difficulty + 1,
            _ => self.difficulty,
        }
    }

    /// Response length of the ground-truth answer.
    pub fn response_len(&self) -> usize {
        match self.kind {
            FamilyKind::ModularChain => self.difficulty + 4,
            _ => self.difficulty + 2,
        }
    }

    /// Context window that covers every dependency of the ground-truth rule.
    pub fn required_window(&self) -> usize {
        match self.kind {
            FamilyKind::ModularChain => self.difficulty + 2,
            _ => 2 * self.difficulty + 2,
        }
    }

    fn split_of(&self, operands: &[TokenId]) -> Split {
        let h = seed::derive(
            self.kind.tag(),
            &operands.iter().map(|&x| u64::from(x)).collect::<Vec<_>>(),
        );
        if h.is_multiple_of(EVAL_BUCKETS) {
            Split::Eval
        } else {
            Split::Train
        }
    }

    pub fn instance(&self, operands: Vec<TokenId>) -> Result<TaskInstance> {
        if operands.len() != self.operand_count() {
            return Err(Error::Input(format!(
                "{} expects {} operands, got {}",
                self.kind.name(),
                self.operand_count(),
                operands.len()
            )));
        }
        if let Some(x) = operands.iter().find(|&&x| x >= self.base) {
            return Err(Error::Input(format!("operand {x} out of range for base {}", self.base)));
        }
        let mut prompt = Vec::with_capacity(operands.len() + 2);
        prompt.push(BOS);
        prompt.extend_from_slice(&operands);
        prompt.push(SEP);
        let response = self.solve(&operands, None);
        let answer = answer_span(&response).expect("ground truth is well formed").to_vec();
        Ok(TaskInstance {
            family: self.kind,
            base: self.base,
            difficulty: self.difficulty,
            prompt,
            answer,
            ground_truth: response,
        })
    }

    /// The ground-truth response, or a flawed one when `rng` is given.
    fn solve(&self, operands: &[TokenId], mut flaw: Option<&mut Rng>) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.response_len());
        match self.kind {
            FamilyKind::ModularChain => {
                let m = self.base;
                let mut s = operands[0];
                out.push(s);
                for &x in &operands[1..] {
                    let sum = s + x;
                    s = sum % m;
                    if sum >= m {
                        if let Some(rng) = flaw.as_deref_mut() {
                            // a wrong digit in place of the reduction
                            s = (s + rng.gen_range(1..m)) % m;
                        }
                    }
                    out.push(s);
                }
                out.push(ANS);
                out.push(s);
            }
            FamilyKind::CopyReverse => {
                out.push(ANS);
                if flaw.is_some() {
                    out.extend(operands.iter().copied());
                } else {
                    out.extend(operands.iter().rev().copied());
                }
            }
            FamilyKind::SortedEmit => {
                out.push(ANS);
                let mut xs = operands.to_vec();
                if flaw.is_none() {
                    xs.sort_unstable();
                }
                out.extend(xs);
            }
        }
        out.push(EOS);
        out
    }

    fn random_operands(&self, rng: &mut Rng) -> Vec<TokenId> {
        (0..self.operand_count()).map(|_| rng.gen_range(0..self.base)).collect()
    }

    /// `n` instances from `split`, sampled with replacement.
    pub fn generate_instances(&self, n: usize, split: Split, seed: u64) -> Result<Vec<TaskInstance>> {
        if n == 0 {
            return Err(Error::Input("n must be >= 1".into()));
        }
        let stream = match split {
            Split::Train => seed::stream::TASKS_TRAIN,
            Split::Eval => seed::stream::TASKS_EVAL,
        };
        let mut rng = seed::rng(seed, &[stream, self.kind.tag()]);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 10_000 {
                return Err(Error::Setup(format!(
                    "could not draw {n} {split:?} instances for {}; the split is empty",
                    self.kind.name()
                )));
            }
            let ops = self.random_operands(&mut rng);
            if self.split_of(&ops) == split {
                out.push(self.instance(ops)?);
            }
        }
        Ok(out)
    }

    /// Demonstration corpus mixing ground-truth responses (at `correct_rate`)
    /// with flawed ones. Flawed `modular_chain` demonstrations get every
    /// wrap-around step wrong and every other step right.
    pub fn demonstrations(&self, n: usize, correct_rate: f64, seed: u64) -> Result<Vec<Sequence>> {
        let instances = self.generate_instances(n, Split::Train, seed)?;
        let mut rng = seed::rng(seed, &[seed::stream::PRETRAIN, self.kind.tag()]);
        Ok(instances
            .into_iter()
            .map(|inst| {
                let correct = rng.gen::<f64>() < correct_rate;
                let ops = inst.operands().to_vec();
                let response = if correct {
                    inst.ground_truth.clone()
                } else {
                    self.solve(&ops, Some(&mut rng))
                };
                Sequence::new(inst.prompt, response)
            })
            .collect())
    }
}

/// A prompt plus everything its verifier needs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub family: FamilyKind,
    pub base: u32,
    pub difficulty: usize,
    #[serde(rename = "prompt_tokens")]
    pub prompt: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub ground_truth: Vec<TokenId>,
}

impl TaskInstance {
    #[cfg(test)]
    pub(crate) fn for_tests(prompt: Vec<TokenId>, answer: Vec<TokenId>) -> Self {
        let mut ground_truth = vec![ANS];
        ground_truth.extend(&answer);
        ground_truth.push(EOS);
        Self {
            family: FamilyKind::CopyReverse,
            base: 10,
            difficulty: answer.len(),
            prompt,
            answer,
            ground_truth,
        }
    }

    pub fn family(&self) -> Result<TaskFamily> {
        TaskFamily::new(self.family, self.base, self.difficulty)
    }

    pub fn operands(&self) -> &[TokenId] {
        &self.prompt[1..self.prompt.len() - 1]
    }

    /// Outcome reward: 1 iff the answer span matches exactly.
    pub fn verify(&self, response: &[TokenId]) -> f64 {
        match answer_span(response) {
            Some(span) if span == self.answer.as_slice() => 1.0,
            _ => 0.0,
        }
    }

    /// Response positions of the wrap-around steps of a `modular_chain`
    /// ground truth.
    pub fn pivotal_positions(&self) -> Vec<usize> {
        if self.family != FamilyKind::ModularChain {
            return Vec::new();
        }
        let ops = self.operands();
        let mut s = ops[0];
        let mut out = Vec::new();
        for (t, &x) in ops[1..].iter().enumerate() {
            if s + x >= self.base {
                out.push(t + 1);
            }
            s = (s + x) % self.base;
        }
        out
    }

    pub fn is_easy(&self) -> bool {
        self.pivotal_positions().is_empty()
    }

    /// Re-check a deserialized instance against its family's rule.
    pub fn validate(&self) -> Result<()> {
        let family = self.family()?;
        if self.prompt.len() < 2 || self.prompt[0] != BOS || *self.prompt.last().unwrap() != SEP {
            return Err(Error::Format("prompt must be BOS ... SEP".into()));
        }
        let rebuilt = family.instance(self.operands().to_vec())?;
        if rebuilt != *self {
            return Err(Error::Format("instance disagrees with its family's rule".into()));
        }
        Ok(())
    }
}

/// Tokens between the first `ANS` and the following `EOS`. `None` when
/// either delimiter is missing.
pub fn answer_span(response: &[TokenId]) -> Option<&[TokenId]> {
    let start = response.iter().position(|&t| t == ANS)? + 1;
    let len = response[start..].iter().position(|&t| t == EOS)?;
    Some(&response[start..start + len])
}

pub fn write_instances_jsonl<W: Write>(mut out: W, instances: &[TaskInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instances_jsonl(text: &str) -> Result<Vec<TaskInstance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let inst: TaskInstance =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            inst.validate()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            Ok(inst)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub corpus_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of demonstrations that are fully correct.
    pub correct_rate: f64,
    pub learning_rate: f64,
    /// Minimum sampled accuracy on easy eval instances.
    pub easy_floor: f64,
    pub eval_instances: usize,
    pub eval_repeats: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            corpus_size: 16384,
            epochs: 10,
            batch_size: 32,
            correct_rate: 0.5,
            learning_rate: 1e-2,
            easy_floor: 0.8,
            eval_instances: 64,
            eval_repeats: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub model: PolicyModel,
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    pub final_nll: f64,
}

/// Fit `model` to a demonstration corpus by maximum likelihood and return
/// the result as the frozen reference policy.
pub fn pretrain_reference(
    family: &TaskFamily,
    model: PolicyModel,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Setup("pretraining batch_size must be >= 1".into()));
    }
    let mut model = model;
    let corpus = family.demonstrations(cfg.corpus_size.max(1), cfg.correct_rate, seed)?;
    let opt_cfg = OptimizerConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut opt = Optimizer::new(opt_cfg, model.param_count());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = seed::rng(seed, &[seed::stream::PRETRAIN, 99]);
    let mut final_nll = f64::NAN;
    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut nll = 0.0;
        let mut tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<Sequence> = batch.iter().map(|&i| corpus[i].clone()).collect();
            let n_tok: usize = seqs.iter().map(Sequence::len).sum();
            // descend the mean token negative log-likelihood
            let coeffs: Vec<Vec<f64>> = seqs.iter().map(|s| vec![-1.0 / n_tok as f64; s.len()]).collect();
            let grad = weighted_logprob_gradient(&model, &seqs, &coeffs)?;
            for s in &seqs {
                nll -= model.sequence_log_probs(s)?.iter().sum::<f64>();
            }
            tokens += n_tok;
            opt.step(model.params_mut(), &grad);
        }
        final_nll = nll / tokens as f64;
    }

    let eval = family.generate_instances(cfg.eval_instances.max(1) * 4, Split::Eval, seed)?;
    let (easy, hard): (Vec<_>, Vec<_>) = eval.into_iter().partition(TaskInstance::is_easy);
    let max_len = family.response_len() * 2;
    let acc = |set: &[TaskInstance], tag: u64| -> Result<f64> {
        if set.is_empty() {
            return Ok(f64::NAN);
        }
        let set = &set[..set.len().min(cfg.eval_instances.max(1))];
        let report = crate::trainer::evaluate(
            &model,
            set,
            cfg.eval_repeats.max(1),
            1.0,
            max_len,
            seed::derive(seed, &[tag]),
        )?;
        Ok(report.avg)
    };
    let easy_accuracy = acc(&easy, 1)?;
    let hard_accuracy = acc(&hard, 2)?;
    if easy_accuracy.is_finite() && easy_accuracy < cfg.easy_floor {
        return Err(Error::Setup(format!(
            "reference reached easy-split accuracy {easy_accuracy:.3} below the floor {:.3} \
             (hard {hard_accuracy:.3}, final nll {final_nll:.4}, {} epochs on {} demonstrations)",
            cfg.easy_floor,
            cfg.epochs,
            corpus.len()
        )));
    }
    Ok(PretrainReport {
        model,
        easy_accuracy,
        hard_accuracy,
        final_nll,
    })
}

fn shuffle(xs: &mut [usize], rng: &mut Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}
