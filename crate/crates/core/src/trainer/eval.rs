//! Sampled evaluation: avg@k, pass@k and cons@k.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::policy::{PolicyModel, TokenId};
use crate::seed;
use crate::tasks::{answer_span, TaskInstance};
use crate::{Error, Result};

/// One sampled response, reduced to what the metrics need.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleOutcome {
    pub correct: bool,
    /// Final answer span, if the response had one.
    pub answer: Option<Vec<TokenId>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-instance fraction of correct samples.
    pub avg: f64,
    /// Fraction of instances with at least one correct sample.
    pub pass: f64,
    /// Fraction of instances whose most frequent answer is correct.
    pub cons: f64,
    pub instances: usize,
    pub k: usize,
}

impl EvalReport {
    /// Metrics over `k` outcomes per instance. Majority-vote ties go to the
    /// answer seen first; a missing answer can win the vote and is wrong.
    pub fn from_outcomes(outcomes: &[Vec<SampleOutcome>]) -> Result<Self> {
        let k = outcomes.first().map_or(0, Vec::len);
        if k == 0 || outcomes.iter().any(|o| o.len() != k) {
            return Err(Error::Input("every instance needs the same k >= 1 outcomes".into()));
        }
        let n = outcomes.len() as f64;
        let mut avg = 0.0;
        let mut pass = 0.0;
        let mut cons = 0.0;
        for samples in outcomes {
            let correct = samples.iter().filter(|s| s.correct).count();
            avg += correct as f64 / k as f64;
            pass += f64::from(u8::from(correct > 0));
            cons += f64::from(u8::from(majority(samples).correct));
        }
        Ok(Self {
            avg: avg / n,
            pass: pass / n,
            cons: cons / n,
            instances: outcomes.len(),
            k,
        })
    }
}

fn majority(samples: &[SampleOutcome]) -> &SampleOutcome {
    let mut best = &samples[0];
    let mut best_count = 0;
    for (i, s) in samples.iter().enumerate() {
        if samples[..i].iter().any(|p| p.answer == s.answer) {
            continue;
        }
        let count = samples[i..].iter().filter(|p| p.answer == s.answer).count();
        if count > best_count {
            best = s;
            best_count = count;
        }
    }
    best
}

/// Sample `k` responses per instance at `temperature` and score them.
/// Instance `i` uses its own random stream, so results do not depend on
/// thread scheduling.
pub fn evaluate(
    model: &PolicyModel,
    instances: &[TaskInstance],
    k: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Input("k must be >= 1".into()));
    }
    if instances.is_empty() {
        return Err(Error::Input("no evaluation instances".into()));
    }
    let outcomes = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = seed::rng(seed, &[seed::stream::EVAL, i as u64]);
            (0..k)
                .map(|_| {
                    let s = model.sample_with_temperature(&inst.prompt, max_len, temperature, &mut rng)?;
                    let response = &s.sequence.response;
                    Ok(SampleOutcome {
                        correct: inst.verify(response) > 0.0,
                        answer: answer_span(response).map(<[TokenId]>::to_vec),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_outcomes(&outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Architecture, Vocab};
    use crate::tasks::{FamilyKind, Split, TaskFamily, ANS, EOS};

    fn o(correct: bool, answer: Option<&[TokenId]>) -> SampleOutcome {
        SampleOutcome {
            correct,
            answer: answer.map(<[TokenId]>::to_vec),
        }
    }

    #[test]
    fn hand_computed_k4() {
        // instance 1: 2/4 correct, mode [1] correct (2 vs 1 vs 1)
        // instance 2: 1/4 correct, mode [2] wrong
        // instance 3: 0/4, no answers
        let outcomes = vec![
            vec![
                o(true, Some(&[1])),
                o(false, Some(&[2])),
                o(true, Some(&[1])),
                o(false, None),
            ],
            vec![
                o(false, Some(&[2])),
                o(false, Some(&[2])),
                o(true, Some(&[3])),
                o(false, Some(&[2])),
            ],
            vec![o(false, None); 4],
        ];
        let r = EvalReport::from_outcomes(&outcomes).unwrap();
        assert!((r.avg - (0.5 + 0.25 + 0.0) / 3.0).abs() < 1e-15);
        assert!((r.pass - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.cons - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((r.instances, r.k), (3, 4));
    }

    #[test]
    fn vote_ties_go_to_the_first_answer() {
        let first_right = vec![vec![o(true, Some(&[1])), o(false, Some(&[2]))]];
        assert_eq!(EvalReport::from_outcomes(&first_right).unwrap().cons, 1.0);
        let first_wrong = vec![vec![o(false, Some(&[2])), o(true, Some(&[1]))]];
        assert_eq!(EvalReport::from_outcomes(&first_wrong).unwrap().cons, 0.0);
    }

    #[test]
    fn ragged_outcomes_are_rejected() {
        assert!(EvalReport::from_outcomes(&[]).is_err());
        assert!(EvalReport::from_outcomes(&[vec![o(true, None)], vec![]]).is_err());
    }

    /// A tabular policy that emits `tokens` regardless of context, by
    /// keying on response position through a one-token window.
    fn scripted(tokens: &[TokenId], correct_bias: f64) -> PolicyModel {
        let vocab = crate::tasks::vocab();
        let v = vocab.size();
        let buckets = 1 << 12;
        let mut m = PolicyModel::zeros(Architecture::Tabular { buckets }, vocab, 1).unwrap();
        let mut rows = vec![(m.bucket_of(&[crate::tasks::SEP], &[]).unwrap().unwrap(), tokens[0])];
        for w in tokens.windows(2) {
            rows.push((m.bucket_of(&[], &[w[0]]).unwrap().unwrap(), w[1]));
        }
        for (b, tok) in rows {
            let row = &mut m.params_mut()[b * v..(b + 1) * v];
            row.iter_mut().for_each(|x| *x = 0.0);
            row[tok as usize] = correct_bias;
        }
        m
    }

    #[test]
    fn deterministic_correct_policy_scores_one() {
        let inst = TaskInstance::for_tests(vec![crate::tasks::BOS, 3, crate::tasks::SEP], vec![3]);
        let m = scripted(&[ANS, 3, EOS], 1e3);
        let r = evaluate(&m, &[inst], 1, 1.0, 8, 0).unwrap();
        assert_eq!((r.avg, r.pass, r.cons), (1.0, 1.0, 1.0));
    }

    #[test]
    fn avg_tracks_per_sample_success_probability() {
        // First token is ANS with prob p, anything else is a failure.
        let vocab = Vocab::new(16, EOS, crate::tasks::PAD).unwrap();
        let mut m = scripted(&[ANS, 3, EOS], 1e3);
        let sep = m.bucket_of(&[crate::tasks::SEP], &[]).unwrap().unwrap();
        let p: f64 = 0.3;
        let v = vocab.size();
        // logits: ANS gets ln p, EOS gets ln(1 - p), the rest -inf-ish
        let row = &mut m.params_mut()[sep * v..(sep + 1) * v];
        row.iter_mut().for_each(|x| *x = -1e3);
        row[ANS as usize] = p.ln();
        row[EOS as usize] = (1.0 - p).ln();
        let inst = TaskInstance::for_tests(vec![crate::tasks::BOS, 3, crate::tasks::SEP], vec![3]);
        let n = 400;
        let k = 25;
        let set = vec![inst; n];
        let r = evaluate(&m, &set, k, 1.0, 8, 11).unwrap();
        let se = (p * (1.0 - p) / (n * k) as f64).sqrt();
        assert!((r.avg - p).abs() < 3.0 * se, "avg {} vs {p} (se {se})", r.avg);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let family = TaskFamily::new(FamilyKind::ModularChain, 5, 2).unwrap();
        let set = family.generate_instances(16, Split::Eval, 3).unwrap();
        let m = PolicyModel::init(
            Architecture::Mlp {
                embed_dim: 4,
                hidden: 8,
            },
            crate::tasks::vocab(),
            4,
            1,
            0.5,
        )
        .unwrap();
        let a = evaluate(&m, &set, 4, 1.0, 10, 5).unwrap();
        let b = evaluate(&m, &set, 4, 1.0, 10, 5).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&m, &set, 0, 1.0, 10, 5).is_err());
    }
}
