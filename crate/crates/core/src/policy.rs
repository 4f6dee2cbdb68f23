//! Small autoregressive categorical policies.
//!
//! Two parameterizations share one interface:
//!
//! * **tabular**: one logit row per context bucket, where the bucket is a
//!   hash of the last `context_window` tokens. The score function of a row is
//!   the closed form `one_hot(y) - pi`, which makes it the reference model for
//!   exact gradient tests.
//! * **mlp**: embeddings of the last `context_window` tokens, concatenated,
//!   feed one `tanh` hidden layer and a linear read-out to the logits.
//!
//! Contexts shorter than the window are left-padded with the vocabulary's
//! padding id; longer ones are truncated from the left. Probabilities are
//! carried as log-probabilities internally and only exponentiated when a
//! [`TokenDistribution`] is handed out.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::{Error, Result};

pub type TokenId = u32;

/// Finite vocabulary with a reserved end-of-sequence id and a padding id
/// used to fill short contexts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    eos: TokenId,
    pad: TokenId,
}

impl Vocab {
    pub fn new(size: u32, eos: TokenId, pad: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::Input(format!("vocab size must be >= 2, got {size}")));
        }
        if eos >= size || pad >= size {
            return Err(Error::Input(format!(
                "special ids (eos {eos}, pad {pad}) must be < vocab size {size}"
            )));
        }
        Ok(Self { size, eos, pad })
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.size) {
            Some(t) => Err(Error::Input(format!(
                "token id {t} out of range for vocab of size {}",
                self.size
            ))),
            None => Ok(()),
        }
    }
}

/// A probability vector over a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty distribution".into()));
        }
        if let Some((a, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::Input(format!("invalid probability {p} at index {a}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Input(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Exponentiate normalized log-probabilities.
    pub fn from_log_probs(log_probs: &[f64]) -> Self {
        let mut probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        Self { probs }
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token as usize]
    }
}

/// A prompt and the response generated for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Sequence {
    pub fn new(prompt: Vec<TokenId>, response: Vec<TokenId>) -> Self {
        Self { prompt, response }
    }

    /// Response length `T`.
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

/// A sampled sequence together with the log-probability the sampling policy
/// assigned to each response token.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequence {
    pub sequence: Sequence,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Tabular { buckets: usize },
    Mlp { embed_dim: usize, hidden: usize },
}

impl Architecture {
    pub fn param_count(&self, vocab: usize, context_window: usize) -> usize {
        match *self {
            Architecture::Tabular { buckets } => buckets * vocab,
            Architecture::Mlp { embed_dim, hidden } => {
                vocab * embed_dim + hidden * context_window * embed_dim + hidden + vocab * hidden + vocab
            }
        }
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    window: Vec<TokenId>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    log_probs: Vec<f64>,
}

impl Activations {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn distribution(&self) -> TokenDistribution {
        TokenDistribution::from_log_probs(&self.log_probs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    arch: Architecture,
    vocab: Vocab,
    context_window: usize,
    params: Vec<f64>,
}

struct MlpLayout {
    embed: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl PolicyModel {
    /// A model with every parameter set to zero.
    pub fn zeros(arch: Architecture, vocab: Vocab, context_window: usize) -> Result<Self> {
        let n = Self::validate_shape(arch, vocab, context_window)?;
        Ok(Self {
            arch,
            vocab,
            context_window,
            params: vec![0.0; n],
        })
    }

    /// A model with parameters drawn from `N(0, scale^2)` using `seed`.
    pub fn init(arch: Architecture, vocab: Vocab, context_window: usize, seed: u64, scale: f64) -> Result<Self> {
        let mut model = Self::zeros(arch, vocab, context_window)?;
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Input(format!("init scale: {e}")))?;
        let mut rng = crate::seed::rng(seed, &[crate::seed::stream::INIT]);
        model.params.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        Ok(model)
    }

    pub fn from_parts(arch: Architecture, vocab: Vocab, context_window: usize, params: Vec<f64>) -> Result<Self> {
        let n = Self::validate_shape(arch, vocab, context_window)?;
        if params.len() != n {
            return Err(Error::Input(format!(
                "expected {n} parameters for {arch:?}, got {}",
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(Self {
            arch,
            vocab,
            context_window,
            params,
        })
    }

    fn validate_shape(arch: Architecture, vocab: Vocab, context_window: usize) -> Result<usize> {
        if context_window == 0 {
            return Err(Error::Input("context window must be positive".into()));
        }
        match arch {
            Architecture::Tabular { buckets: 0 } => {
                return Err(Error::Input("tabular model needs at least one bucket".into()))
            }
            Architecture::Mlp { embed_dim, hidden } if embed_dim == 0 || hidden == 0 => {
                return Err(Error::Input("mlp embed_dim and hidden must be positive".into()))
            }
            _ => {}
        }
        Ok(arch.param_count(vocab.size(), context_window))
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bitwise parameter equality, used to check frozen snapshots.
    pub fn same_params(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// The last `context_window` tokens of `prompt ++ prefix`, left-padded.
    pub fn window(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        self.vocab.check(prompt)?;
        self.vocab.check(prefix)?;
        let k = self.context_window;
        let mut window = vec![self.vocab.pad(); k];
        let total = prompt.len() + prefix.len();
        let take = total.min(k);
        for j in 0..take {
            // position counted from the end of the concatenation
            let pos = total - take + j;
            window[k - take + j] = if pos < prompt.len() {
                prompt[pos]
            } else {
                prefix[pos - prompt.len()]
            };
        }
        Ok(window)
    }

    fn bucket(&self, window: &[TokenId], buckets: usize) -> usize {
        // FNV-1a over the little-endian token ids
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in window {
            for b in t.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        (h % buckets as u64) as usize
    }

    /// Bucket index a context maps to (tabular models only).
    pub fn bucket_of(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Option<usize>> {
        let window = self.window(prompt, prefix)?;
        Ok(match self.arch {
            Architecture::Tabular { buckets } => Some(self.bucket(&window, buckets)),
            Architecture::Mlp { .. } => None,
        })
    }

    fn mlp_layout(&self, embed_dim: usize, hidden: usize) -> MlpLayout {
        let v = self.vocab.size();
        let embed = 0;
        let w1 = embed + v * embed_dim;
        let b1 = w1 + hidden * self.context_window * embed_dim;
        let w2 = b1 + hidden;
        let b2 = w2 + v * hidden;
        MlpLayout { embed, w1, b1, w2, b2 }
    }

    /// Forward pass on an already-windowed context.
    pub fn activations(&self, window: Vec<TokenId>) -> Activations {
        let v = self.vocab.size();
        match self.arch {
            Architecture::Tabular { buckets } => {
                let row = self.bucket(&window, buckets);
                let logits = &self.params[row * v..(row + 1) * v];
                Activations {
                    window,
                    input: Vec::new(),
                    hidden: Vec::new(),
                    log_probs: log_softmax(logits),
                }
            }
            Architecture::Mlp { embed_dim, hidden } => {
                let l = self.mlp_layout(embed_dim, hidden);
                let width = self.context_window * embed_dim;
                let mut input = Vec::with_capacity(width);
                for &t in &window {
                    let row = l.embed + t as usize * embed_dim;
                    input.extend_from_slice(&self.params[row..row + embed_dim]);
                }
                let hid: Vec<f64> = (0..hidden)
                    .map(|h| {
                        let w = &self.params[l.w1 + h * width..l.w1 + (h + 1) * width];
                        let pre = self.params[l.b1 + h] + dot(w, &input);
                        pre.tanh()
                    })
                    .collect();
                let logits: Vec<f64> = (0..v)
                    .map(|a| {
                        let w = &self.params[l.w2 + a * hidden..l.w2 + (a + 1) * hidden];
                        self.params[l.b2 + a] + dot(w, &hid)
                    })
                    .collect();
                Activations {
                    window,
                    input,
                    hidden: hid,
                    log_probs: log_softmax(&logits),
                }
            }
        }
    }

    /// Accumulate `d/dtheta sum_a dlogits[a] * logit_a` into `grad`.
    pub fn backward(&self, act: &Activations, dlogits: &[f64], grad: &mut [f64]) {
        let v = self.vocab.size();
        debug_assert_eq!(dlogits.len(), v);
        debug_assert_eq!(grad.len(), self.params.len());
        match self.arch {
            Architecture::Tabular { buckets } => {
                let row = self.bucket(&act.window, buckets);
                grad[row * v..(row + 1) * v]
                    .iter_mut()
                    .zip(dlogits)
                    .for_each(|(g, d)| *g += d);
            }
            Architecture::Mlp { embed_dim, hidden } => {
                let l = self.mlp_layout(embed_dim, hidden);
                let width = self.context_window * embed_dim;
                let mut dhidden = vec![0.0; hidden];
                for (a, &dl) in dlogits.iter().enumerate() {
                    if dl == 0.0 {
                        continue;
                    }
                    grad[l.b2 + a] += dl;
                    let row = l.w2 + a * hidden;
                    for h in 0..hidden {
                        grad[row + h] += dl * act.hidden[h];
                        dhidden[h] += dl * self.params[row + h];
                    }
                }
                let mut dinput = vec![0.0; width];
                for h in 0..hidden {
                    let dpre = dhidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
                    if dpre == 0.0 {
                        continue;
                    }
                    grad[l.b1 + h] += dpre;
                    let row = l.w1 + h * width;
                    for i in 0..width {
                        grad[row + i] += dpre * act.input[i];
                        dinput[i] += dpre * self.params[row + i];
                    }
                }
                for (j, &t) in act.window.iter().enumerate() {
                    let row = l.embed + t as usize * embed_dim;
                    for c in 0..embed_dim {
                        grad[row + c] += dinput[j * embed_dim + c];
                    }
                }
            }
        }
    }

    /// Log-probabilities of the next token after `prompt ++ prefix`.
    pub fn log_probs(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.activations(self.window(prompt, prefix)?).log_probs)
    }

    /// Next-token distribution for a context.
    pub fn forward(&self, context: &[TokenId]) -> Result<TokenDistribution> {
        Ok(TokenDistribution::from_log_probs(&self.log_probs(context, &[])?))
    }

    /// Per-step log-probabilities of the response tokens of `seq`.
    pub fn sequence_log_probs(&self, seq: &Sequence) -> Result<Vec<f64>> {
        (0..seq.len())
            .map(|t| {
                let lp = self.log_probs(&seq.prompt, &seq.response[..t])?;
                Ok(lp[seq.response[t] as usize])
            })
            .collect()
    }

    pub fn sample_sequence(&self, prompt: &[TokenId], max_len: usize, rng: &mut Rng) -> Result<SampledSequence> {
        self.sample_with_temperature(prompt, max_len, 1.0, rng)
    }

    /// Sample a response. Stops after emitting end-of-sequence or at
    /// `max_len` tokens. Recorded log-probabilities are those of the
    /// untempered model at the sampled ids.
    pub fn sample_with_temperature(
        &self,
        prompt: &[TokenId],
        max_len: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<SampledSequence> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be >= 1".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
        }
        let mut response = Vec::with_capacity(max_len);
        let mut log_probs = Vec::with_capacity(max_len);
        while response.len() < max_len {
            let lp = self.log_probs(prompt, &response)?;
            let token = if temperature == 1.0 {
                sample_log_probs(&lp, rng)
            } else {
                let scaled: Vec<f64> = lp.iter().map(|x| x / temperature).collect();
                sample_log_probs(&log_softmax(&scaled), rng)
            };
            log_probs.push(lp[token as usize]);
            response.push(token);
            if token == self.vocab.eos() {
                break;
            }
        }
        Ok(SampledSequence {
            sequence: Sequence::new(prompt.to_vec(), response),
            log_probs,
        })
    }

    /// Most likely continuation, ties broken toward the lower id.
    pub fn greedy(&self, prompt: &[TokenId], max_len: usize) -> Result<Sequence> {
        let mut response = Vec::new();
        while response.len() < max_len {
            let lp = self.log_probs(prompt, &response)?;
            let token = argmax(&lp) as TokenId;
            response.push(token);
            if token == self.vocab.eos() {
                break;
            }
        }
        Ok(Sequence::new(prompt.to_vec(), response))
    }
}

/// Exact gradient of `sum_{i,t} coeffs[i][t] * log pi(y_{i,t} | context)`.
pub fn weighted_logprob_gradient(model: &PolicyModel, sequences: &[Sequence], coeffs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sequences.len() != coeffs.len() {
        return Err(Error::Input(format!(
            "{} sequences but {} coefficient rows",
            sequences.len(),
            coeffs.len()
        )));
    }
    let mut grad = vec![0.0; model.param_count()];
    for (i, (seq, c)) in sequences.iter().zip(coeffs).enumerate() {
        if seq.len() != c.len() {
            return Err(Error::Input(format!(
                "sequence {i} has {} tokens but {} coefficients",
                seq.len(),
                c.len()
            )));
        }
        for (t, &coeff) in c.iter().enumerate() {
            if coeff == 0.0 {
                continue;
            }
            let act = model.activations(model.window(&seq.prompt, &seq.response[..t])?);
            let dlogits = score_direction(&act, seq.response[t], coeff);
            model.backward(&act, &dlogits, &mut grad);
        }
    }
    Ok(grad)
}

/// `coeff * (one_hot(token) - pi)`: the logit gradient of `coeff * log pi(token)`.
pub fn score_direction(act: &Activations, token: TokenId, coeff: f64) -> Vec<f64> {
    let mut d: Vec<f64> = act.log_probs.iter().map(|lp| -coeff * lp.exp()).collect();
    d[token as usize] += coeff;
    d
}

/// Central-difference gradient of `loss` with respect to the model parameters.
pub fn finite_diff_gradient<F>(model: &PolicyModel, loss: F, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&PolicyModel) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = model.clone();
    let mut grad = Vec::with_capacity(model.param_count());
    for i in 0..model.param_count() {
        let orig = probe.params[i];
        probe.params[i] = orig + step;
        let plus = loss(&probe)?;
        probe.params[i] = orig - step;
        let minus = loss(&probe)?;
        probe.params[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while perturbing parameter {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

fn sample_log_probs(log_probs: &[f64], rng: &mut Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (a, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = a;
        }
        acc += p;
        if u < acc {
            return a as TokenId;
        }
    }
    // rounding left the cumulative sum just below u
    last_positive as TokenId
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: u32) -> Vocab {
        Vocab::new(n, n - 1, 0).unwrap()
    }

    fn rng(seed: u64) -> Rng {
        crate::seed::rng(seed, &[])
    }

    #[test]
    fn vocab_rejects_bad_shapes() {
        assert!(Vocab::new(1, 0, 0).is_err());
        assert!(Vocab::new(4, 4, 0).is_err());
        assert!(Vocab::new(4, 3, 9).is_err());
        assert!(Vocab::new(2, 1, 0).is_ok());
    }

    #[test]
    fn distribution_validation() {
        assert!(TokenDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(TokenDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(TokenDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(TokenDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(TokenDistribution::new(vec![]).is_err());
    }

    #[test]
    fn zero_logits_give_uniform() {
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 8 }, vocab(5), 3).unwrap();
        let d = m.forward(&[1, 2, 3, 1]).unwrap();
        for p in d.probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = PolicyModel::init(
            Architecture::Mlp {
                embed_dim: 3,
                hidden: 5,
            },
            vocab(6),
            4,
            9,
            0.5,
        )
        .unwrap();
        let a = m.forward(&[1, 2, 3]).unwrap();
        let b = m.forward(&[1, 2, 3]).unwrap();
        assert!(a.probs().iter().zip(b.probs()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn forward_rejects_out_of_vocab() {
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 2 }, vocab(4), 2).unwrap();
        assert!(matches!(m.forward(&[1, 7]), Err(Error::Input(_))));
    }

    #[test]
    fn window_pads_and_truncates() {
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 2 }, Vocab::new(8, 7, 6).unwrap(), 3).unwrap();
        assert_eq!(m.window(&[1], &[]).unwrap(), vec![6, 6, 1]);
        assert_eq!(m.window(&[1, 2], &[3, 4]).unwrap(), vec![2, 3, 4]);
        assert_eq!(m.window(&[], &[5]).unwrap(), vec![6, 6, 5]);
        assert_eq!(m.window(&[1, 2, 3, 4, 5], &[]).unwrap(), vec![3, 4, 5]);
    }

    // Straight-line evaluation of a 3-token MLP with window 1, embed 2,
    // hidden 2, with every weight written out by hand.
    #[test]
    fn mlp_matches_hand_evaluation() {
        let v = Vocab::new(3, 2, 0).unwrap();
        let arch = Architecture::Mlp {
            embed_dim: 2,
            hidden: 2,
        };
        #[rustfmt::skip]
        let params = vec![
            // embeddings: token 0, 1, 2
            0.1, -0.2,   0.3, 0.4,   -0.5, 0.6,
            // w1 (hidden x 2)
            0.7, -0.1,   0.2, 0.9,
            // b1
            0.05, -0.05,
            // w2 (vocab x hidden)
            1.0, -1.0,   0.5, 0.25,   -0.3, 0.8,
            // b2
            0.0, 0.1, -0.1,
        ];
        let m = PolicyModel::from_parts(arch, v, 1, params).unwrap();
        let d = m.forward(&[1]).unwrap();

        let (e0, e1) = (0.3_f64, 0.4_f64);
        let h0 = (0.05 + 0.7 * e0 - 0.1 * e1).tanh();
        let h1 = (-0.05 + 0.2 * e0 + 0.9 * e1).tanh();
        let z = [
            0.0 + 1.0 * h0 - 1.0 * h1,
            0.1 + 0.5 * h0 + 0.25 * h1,
            -0.1 - 0.3 * h0 + 0.8 * h1,
        ];
        let norm: f64 = z.iter().map(|x| x.exp()).sum();
        for a in 0..3 {
            assert!((d.probs()[a] - z[a].exp() / norm).abs() < 1e-14);
        }
    }

    #[test]
    fn eos_policy_stops_after_one_token() {
        let v = vocab(4);
        let mut m = PolicyModel::zeros(Architecture::Tabular { buckets: 1 }, v, 2).unwrap();
        m.params_mut()[3] = 1e4; // eos logit
        let s = m.sample_sequence(&[1], 10, &mut rng(1)).unwrap();
        assert_eq!(s.sequence.response, vec![3]);
        assert_eq!(s.sequence.len(), 1);
    }

    #[test]
    fn sampling_is_reproducible_and_records_log_probs() {
        let m = PolicyModel::init(
            Architecture::Mlp {
                embed_dim: 3,
                hidden: 4,
            },
            vocab(6),
            3,
            2,
            1.0,
        )
        .unwrap();
        let a = m.sample_sequence(&[1, 2], 12, &mut rng(5)).unwrap();
        let b = m.sample_sequence(&[1, 2], 12, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        let recomputed = m.sequence_log_probs(&a.sequence).unwrap();
        assert_eq!(recomputed, a.log_probs);
        assert!(a.sequence.len() <= 12 && !a.sequence.is_empty());
    }

    #[test]
    fn sampling_respects_max_len() {
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 1 }, vocab(50), 1).unwrap();
        for seed in 0..20 {
            let s = m.sample_sequence(&[], 3, &mut rng(seed)).unwrap();
            assert!(s.sequence.len() <= 3);
        }
        assert!(m.sample_sequence(&[], 0, &mut rng(0)).is_err());
    }

    #[test]
    fn uniform_first_token_frequencies() {
        // binomial: se = sqrt(0.25 * 0.75 / n)
        let n = 100_000;
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 1 }, vocab(4), 1).unwrap();
        let mut r = rng(11);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let s = m.sample_sequence(&[0], 10, &mut r).unwrap();
            counts[s.sequence.response[0] as usize] += 1;
        }
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 3.0 * se, "freq {freq}");
        }
    }

    #[test]
    fn zero_coefficients_give_zero_gradient() {
        let m = PolicyModel::init(
            Architecture::Mlp {
                embed_dim: 2,
                hidden: 3,
            },
            vocab(4),
            2,
            1,
            0.3,
        )
        .unwrap();
        let seq = Sequence::new(vec![1], vec![2, 3]);
        let g = weighted_logprob_gradient(&m, &[seq], &[vec![0.0, 0.0]]).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tabular_gradient_is_score_function_row() {
        let v = vocab(4);
        let m = PolicyModel::init(Architecture::Tabular { buckets: 16 }, v, 2, 3, 1.0).unwrap();
        let seq = Sequence::new(vec![1, 2], vec![0]);
        let g = weighted_logprob_gradient(&m, std::slice::from_ref(&seq), &[vec![1.0]]).unwrap();
        let row = m.bucket_of(&seq.prompt, &[]).unwrap().unwrap();
        let pi = m.forward(&seq.prompt).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let expected = if j / 4 == row {
                let a = j % 4;
                f64::from(a == 0) - pi.probs()[a]
            } else {
                0.0
            };
            assert!((gj - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_shape_mismatch_is_input_error() {
        let m = PolicyModel::zeros(Architecture::Tabular { buckets: 1 }, vocab(3), 1).unwrap();
        let seq = Sequence::new(vec![], vec![1, 2]);
        assert!(matches!(
            weighted_logprob_gradient(&m, std::slice::from_ref(&seq), &[vec![1.0]]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            weighted_logprob_gradient(&m, &[seq], &[]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn finite_diff_constant_and_quadratic() {
        let m = PolicyModel::init(Architecture::Tabular { buckets: 2 }, vocab(3), 1, 4, 1.0).unwrap();
        let g = finite_diff_gradient(&m, |_| Ok(3.0), 1e-5).unwrap();
        assert!(g.iter().all(|x| *x == 0.0));
        let g = finite_diff_gradient(&m, |p| Ok(0.5 * p.params().iter().map(|x| x * x).sum::<f64>()), 1e-4).unwrap();
        for (gi, ti) in g.iter().zip(m.params()) {
            assert!((gi - ti).abs() < 1e-8);
        }
        assert!(finite_diff_gradient(&m, |_| Ok(f64::NAN), 1e-5).is_err());
        assert!(finite_diff_gradient(&m, |_| Ok(0.0), 0.0).is_err());
    }

    #[test]
    fn from_parts_validates() {
        let v = vocab(3);
        let arch = Architecture::Tabular { buckets: 2 };
        assert!(PolicyModel::from_parts(arch, v, 1, vec![0.0; 5]).is_err());
        assert!(PolicyModel::from_parts(arch, v, 1, vec![f64::INFINITY; 6]).is_err());
        assert!(PolicyModel::from_parts(arch, v, 0, vec![0.0; 6]).is_err());
        assert!(PolicyModel::from_parts(arch, v, 1, vec![0.0; 6]).is_ok());
    }
}
