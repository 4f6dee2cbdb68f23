//! The RL loop.
//!
//! Each collection phase freezes a snapshot of the policy, samples `G`
//! responses for each of a batch of prompts, records the snapshot's and the
//! reference's per-step distributions, and fixes the credit assignment.
//! The optimization phase then takes one step per minibatch of prompts.

mod ablation;
mod eval;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::credit::{credit_records, write_credit_jsonl, CreditRecord};
use crate::objective::{policy_gradient, PreparedGroup};
use crate::optim::Optimizer;
use crate::policy::PolicyModel;
use crate::rollout::{RolloutGroup, RolloutSequence};
use crate::seed::{self, stream};
use crate::tasks::{pretrain_reference, PretrainReport, Split, TaskInstance};
use crate::{Error, Result};

pub use ablation::{
    median, parse_sweep_spec, run_ablation_suite, write_ablation_csv, AblationRow, AblationTable, ReferenceCache,
    SweepCell, SweepSpec, ABLATION_CSV_HEADER, MIN_SEEDS,
};
pub use eval::{evaluate, EvalReport, SampleOutcome};

/// Identifies the code that produced a run's artifacts.
pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// Sample `group_size` responses per prompt from a frozen snapshot and
/// record both policies' per-step distributions and the verified reward.
///
/// Response `j` of prompt `i` draws from its own stream derived from
/// `seed`, so the result is independent of scheduling.
pub fn collect_rollouts(
    snapshot: &PolicyModel,
    reference: &PolicyModel,
    prompts: &[TaskInstance],
    group_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    prompts
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let sequences = (0..group_size)
                .map(|j| {
                    let mut rng = seed::rng(seed, &[i as u64, j as u64]);
                    let sample = snapshot.sample_sequence(&inst.prompt, max_len, &mut rng)?;
                    let reward = inst.verify(&sample.sequence.response);
                    RolloutSequence::record(snapshot, reference, sample.sequence, reward)
                })
                .collect::<Result<Vec<_>>>()?;
            RolloutGroup::new(inst.clone(), sequences)
        })
        .collect()
}

/// Initialize a model from `cfg` and fit it to the demonstration corpus.
pub fn build_reference(cfg: &TrainConfig) -> Result<PretrainReport> {
    let family = cfg.family()?;
    let model = PolicyModel::init(
        cfg.model.architecture(),
        family.vocab(),
        cfg.model.context_window,
        seed::derive(cfg.seed, &[stream::INIT]),
        cfg.model.init_scale,
    )?;
    pretrain_reference(
        &family,
        model,
        &cfg.reference,
        seed::derive(cfg.seed, &[stream::PRETRAIN]),
    )
}

/// The held-out instances a run evaluates on.
pub fn eval_instances(cfg: &TrainConfig) -> Result<Vec<TaskInstance>> {
    cfg.family()?
        .generate_instances(cfg.eval_instances, Split::Eval, cfg.seed)
}

/// Seed of the evaluation taken after `step` optimization steps.
pub fn eval_seed(cfg: &TrainConfig, step: usize) -> u64 {
    seed::derive(cfg.seed, &[stream::EVAL, step as u64])
}

pub fn evaluate_at(
    model: &PolicyModel,
    cfg: &TrainConfig,
    instances: &[TaskInstance],
    step: usize,
) -> Result<EvalReport> {
    evaluate(
        model,
        instances,
        cfg.eval_repeats,
        cfg.eval_temperature,
        cfg.max_len,
        eval_seed(cfg, step),
    )
}

/// One row of `metrics.csv`. Step 0 carries only the initial evaluation;
/// evaluation columns are empty between evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: Option<f64>,
    pub eval_avg: Option<f64>,
    pub eval_pass: Option<f64>,
    pub eval_cons: Option<f64>,
    pub loss: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub clipped_fraction: Option<f64>,
    pub mean_w: Option<f64>,
    pub max_w: Option<f64>,
    pub mean_d: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self {
            wall_time: 0.0,
            ..self.clone()
        } == Self {
            wall_time: 0.0,
            ..other.clone()
        }
    }
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub build: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub variant: String,
    pub steps: usize,
    pub final_eval: EvalReport,
    pub final_loss: Option<f64>,
    pub max_gradient_norm: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: PolicyModel,
    pub metrics: Vec<MetricsRecord>,
    pub final_eval: EvalReport,
    pub summary: RunSummary,
}

/// Artifact writer for one run directory.
struct RunDir {
    root: PathBuf,
    metrics: csv::Writer<File>,
    rollouts: Option<BufWriter<File>>,
}

impl RunDir {
    fn create(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::file(root, e))?;
        let config_path = root.join("config.toml");
        fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::file(&config_path, e))?;
        let metrics_path = root.join("metrics.csv");
        let metrics = csv::Writer::from_path(&metrics_path)
            .map_err(|e| Error::Format(format!("{}: {e}", metrics_path.display())))?;
        let rollouts = if cfg.export_rollouts {
            let p = root.join("rollouts.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::file(&p, e))?))
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            metrics,
            rollouts,
        })
    }

    fn record(&mut self, m: &MetricsRecord) -> Result<()> {
        let p = self.root.join("metrics.csv");
        self.metrics
            .serialize(m)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        self.metrics.flush().map_err(|e| Error::file(&p, e))
    }

    fn rollouts(&mut self, records: &[CreditRecord]) -> Result<()> {
        if let Some(w) = &mut self.rollouts {
            let p = self.root.join("rollouts.jsonl");
            write_credit_jsonl(&mut *w, records).map_err(|e| Error::file(&p, e))?;
            w.flush().map_err(|e| Error::file(&p, e))?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &PolicyModel) -> Result<()> {
        checkpoint::save(model, self.root.join(name))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let p = self.root.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&p, text + "\n").map_err(|e| Error::file(&p, e))
    }
}

fn batch_records(batch: &[PreparedGroup], first_group: usize) -> Vec<CreditRecord> {
    batch
        .iter()
        .enumerate()
        .flat_map(|(g, p)| credit_records(first_group + g, &p.rollout, &p.credit))
        .collect()
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: usize,
    error: String,
    class: &'a str,
    batch: Vec<CreditRecord>,
}

/// Run the RL loop from `reference`, which also initializes the policy.
///
/// With `out` set, writes `config.toml`, `metrics.csv` (flushed per row),
/// optional `rollouts.jsonl`, checkpoints and `summary.json` there. A
/// non-finite loss or gradient aborts the run; the offending minibatch is
/// dumped to `failure.json` first.
pub fn train(cfg: &TrainConfig, reference: &PolicyModel, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let family = cfg.family()?;
    if reference.vocab().size() != family.vocab().size() {
        return Err(Error::Setup("reference vocabulary does not match the task".into()));
    }
    let mut dir = out.map(|p| RunDir::create(p, cfg)).transpose()?;
    let pool = family.generate_instances(cfg.train_pool, Split::Train, cfg.seed)?;
    let eval_set = eval_instances(cfg)?;
    let mode = cfg.variant.credit_mode(cfg.gate());
    let adv = cfg.advantage();
    let surrogate = cfg.surrogate();
    let mut model = reference.clone();
    let mut opt = Optimizer::new(cfg.optimizer_config(), model.param_count());
    let mut metrics = Vec::new();

    let initial = evaluate_at(&model, cfg, &eval_set, 0)?;
    let mut final_eval = initial;
    let first = MetricsRecord {
        step: 0,
        eval_avg: Some(initial.avg),
        eval_pass: Some(initial.pass),
        eval_cons: Some(initial.cons),
        wall_time: start.elapsed().as_secs_f64(),
        ..Default::default()
    };
    if let Some(d) = &mut dir {
        d.record(&first)?;
    }
    metrics.push(first);

    let mut step = 0usize;
    let mut collection = 0u64;
    let mut groups_seen = 0usize;
    while step < cfg.steps {
        let snapshot = model.clone();
        let mut prompt_rng = seed::rng(cfg.seed, &[stream::PROMPTS, collection]);
        let prompts: Vec<TaskInstance> = (0..cfg.prompts_per_batch)
            .map(|_| pool[prompt_rng.gen_range(0..pool.len())].clone())
            .collect();
        let rollout_seed = seed::derive(cfg.seed, &[stream::ROLLOUT, collection]);
        let groups = collect_rollouts(
            &snapshot,
            reference,
            &prompts,
            cfg.group_size,
            cfg.max_len,
            rollout_seed,
        )?;
        let prepared = groups
            .into_iter()
            .map(|g| PreparedGroup::new(g, &mode, &adv))
            .collect::<Result<Vec<_>>>()?;
        if let Some(d) = &mut dir {
            d.rollouts(&batch_records(&prepared, groups_seen))?;
        }

        'epochs: for _ in 0..cfg.inner_epochs {
            for (mb_index, mb) in prepared.chunks(cfg.minibatch_prompts).enumerate() {
                if step >= cfg.steps {
                    break 'epochs;
                }
                let report = policy_gradient(&model, mb, &surrogate).and_then(|r| {
                    if r.loss.is_finite() {
                        Ok(r)
                    } else {
                        Err(Error::Numeric(format!("non-finite loss {}", r.loss)))
                    }
                });
                let report = match report {
                    Ok(r) => r,
                    Err(e) => {
                        let e = Error::Numeric(format!("step {}: {e}", step + 1));
                        if let Some(d) = &dir {
                            let first_group = groups_seen + mb_index * cfg.minibatch_prompts;
                            d.json(
                                "failure.json",
                                &FailureDump {
                                    step: step + 1,
                                    error: e.to_string(),
                                    class: e.class(),
                                    batch: batch_records(mb, first_group),
                                },
                            )?;
                        }
                        return Err(e);
                    }
                };
                opt.step(model.params_mut(), &report.gradient);
                step += 1;

                let tokens = report.token_count as f64;
                let (mut sum_w, mut max_w, mut sum_d, mut sum_h) = (0.0, f64::NEG_INFINITY, 0.0, 0.0);
                for c in mb.iter().flat_map(|g| &g.credit) {
                    sum_w += c.weights.iter().sum::<f64>();
                    max_w = c.weights.iter().copied().fold(max_w, f64::max);
                    sum_d += c.deviations.iter().sum::<f64>();
                    sum_h += c.entropies.iter().sum::<f64>();
                }
                let rewards: Vec<f64> = mb.iter().flat_map(|g| g.rollout.rewards()).collect();
                let mut rec = MetricsRecord {
                    step,
                    mean_reward: Some(rewards.iter().sum::<f64>() / rewards.len() as f64),
                    loss: Some(report.loss),
                    gradient_norm: Some(report.gradient_norm),
                    clipped_fraction: Some(report.clipped_fraction),
                    mean_w: Some(sum_w / tokens),
                    max_w: Some(max_w),
                    mean_d: Some(sum_d / tokens),
                    mean_entropy: Some(sum_h / tokens),
                    ..Default::default()
                };
                if step.is_multiple_of(cfg.eval_every) || step == cfg.steps {
                    let e = evaluate_at(&model, cfg, &eval_set, step)?;
                    rec.eval_avg = Some(e.avg);
                    rec.eval_pass = Some(e.pass);
                    rec.eval_cons = Some(e.cons);
                    final_eval = e;
                }
                rec.wall_time = start.elapsed().as_secs_f64();
                if let Some(d) = &mut dir {
                    d.record(&rec)?;
                    if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                        fs::create_dir_all(d.root.join("checkpoints"))
                            .map_err(|e| Error::file(d.root.join("checkpoints"), e))?;
                        d.checkpoint(&format!("checkpoints/step_{step:06}.ckpt"), &model)?;
                    }
                }
                metrics.push(rec);
            }
        }
        groups_seen += prepared.len();
        collection += 1;
    }

    let summary = RunSummary {
        build: BUILD_ID.to_string(),
        config_hash: cfg.hash(),
        seeds: vec![cfg.seed],
        variant: cfg.variant.name().to_string(),
        steps: step,
        final_eval,
        final_loss: metrics.last().and_then(|m| m.loss),
        max_gradient_norm: metrics.iter().filter_map(|m| m.gradient_norm).reduce(f64::max),
        wall_time: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = &dir {
        d.checkpoint("policy.ckpt", &model)?;
        d.checkpoint("reference.ckpt", reference)?;
        d.json("summary.json", &summary)?;
    }
    Ok(TrainOutput {
        model,
        metrics,
        final_eval,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ModelKind, Override};
    use crate::objective::Variant;
    use crate::tasks::{FamilyKind, TaskFamily};

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.steps = 4;
        cfg.group_size = 4;
        cfg.prompts_per_batch = 4;
        cfg.minibatch_prompts = 2;
        cfg.eval_every = 2;
        cfg.eval_repeats = 2;
        cfg.eval_instances = 8;
        cfg.train_pool = 64;
        cfg.task.base = 5;
        cfg.model = ModelConfig {
            kind: ModelKind::Mlp,
            embed_dim: 4,
            hidden: 8,
            context_window: 4,
            ..ModelConfig::default()
        };
        cfg
    }

    fn random_reference(cfg: &TrainConfig) -> PolicyModel {
        PolicyModel::init(
            cfg.model.architecture(),
            crate::tasks::vocab(),
            cfg.model.context_window,
            9,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn recorded_log_probs_match_recomputation() {
        let cfg = tiny();
        let m = random_reference(&cfg);
        let family = TaskFamily::new(FamilyKind::ModularChain, 5, 2).unwrap();
        let prompts = family.generate_instances(1, Split::Train, 0).unwrap();
        let groups = collect_rollouts(&m, &m, &prompts, 2, 12, 7).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].sequences.len(), 2);
        for s in &groups[0].sequences {
            assert_eq!(s.old_log_probs, m.sequence_log_probs(&s.sequence).unwrap());
            assert_eq!(s.reward, prompts[0].verify(&s.sequence.response));
        }
    }

    #[test]
    fn deterministic_policy_gives_identical_group_and_zero_advantages() {
        let vocab = crate::tasks::vocab();
        let mut m = PolicyModel::zeros(crate::policy::Architecture::Tabular { buckets: 1 }, vocab, 1).unwrap();
        m.params_mut()[crate::tasks::EOS as usize] = 1e3;
        let family = TaskFamily::new(FamilyKind::ModularChain, 5, 2).unwrap();
        let prompts = family.generate_instances(1, Split::Train, 0).unwrap();
        let groups = collect_rollouts(&m, &m, &prompts, 4, 12, 1).unwrap();
        let first = &groups[0].sequences[0].sequence;
        assert!(groups[0].sequences.iter().all(|s| &s.sequence == first));
        let p = PreparedGroup::new(
            groups[0].clone(),
            &Variant::Dgpo.credit_mode(Default::default()),
            &Default::default(),
        )
        .unwrap();
        assert!(p.credit.iter().all(|c| c.sequence_advantage == 0.0));
    }

    #[test]
    fn rollouts_are_reproducible() {
        let cfg = tiny();
        let m = random_reference(&cfg);
        let family = TaskFamily::new(FamilyKind::ModularChain, 5, 2).unwrap();
        let prompts = family.generate_instances(3, Split::Train, 0).unwrap();
        let a = collect_rollouts(&m, &m, &prompts, 3, 12, 7).unwrap();
        let b = collect_rollouts(&m, &m, &prompts, 3, 12, 7).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (sa, sb) in ga.sequences.iter().zip(&gb.sequences) {
                assert_eq!(sa.sequence, sb.sequence);
                assert!(sa
                    .old_log_probs
                    .iter()
                    .zip(&sb.old_log_probs)
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn zero_steps_returns_the_initial_policy() {
        let mut cfg = tiny();
        cfg.steps = 0;
        let r = random_reference(&cfg);
        let out = train(&cfg, &r, None).unwrap();
        assert!(out.model.same_params(&r));
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].step, 0);
        assert!(out.metrics[0].eval_avg.is_some() && out.metrics[0].loss.is_none());
    }

    #[test]
    fn training_is_reproducible_and_writes_artifacts() {
        let cfg = tiny()
            .with_overrides(&[
                Override::new("export_rollouts", true),
                Override::new("checkpoint_every", 2),
            ])
            .unwrap();
        let r = random_reference(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let a = train(&cfg, &r, Some(dir.path())).unwrap();
        let b = train(&cfg, &r, None).unwrap();
        assert_eq!(a.metrics.len(), 5);
        assert!(a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_values(y)));
        assert!(a.model.same_params(&b.model));
        for m in &a.metrics[1..] {
            assert!(m.gradient_norm.unwrap().is_finite());
            assert!((0.0..=1.0).contains(&m.clipped_fraction.unwrap()));
        }
        assert!(a.metrics.windows(2).all(|w| w[0].step < w[1].step));

        let read = read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(read.len(), 5);
        assert!(read.iter().zip(&a.metrics).all(|(x, y)| x.same_values(y)));
        assert!(checkpoint::load(dir.path().join("policy.ckpt"))
            .unwrap()
            .same_params(&a.model));
        assert!(checkpoint::load(dir.path().join("reference.ckpt"))
            .unwrap()
            .same_params(&r));
        assert!(dir.path().join("checkpoints/step_000002.ckpt").exists());
        assert!(dir.path().join("checkpoints/step_000004.ckpt").exists());
        let resolved = crate::config::load(dir.path().join("config.toml"), &[]).unwrap();
        assert_eq!(resolved, cfg);
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary.config_hash, cfg.hash());
        assert_eq!(summary.seeds, vec![cfg.seed]);
        let credit =
            crate::credit::read_credit_jsonl(&fs::read_to_string(dir.path().join("rollouts.jsonl")).unwrap()).unwrap();
        // two collections of 4 prompts with 4 responses each
        assert_eq!(credit.len(), 2 * 4 * 4);
    }

    #[test]
    fn first_minibatch_after_collection_has_unit_ratios() {
        let cfg = tiny();
        let r = random_reference(&cfg);
        let out = train(&cfg, &r, None).unwrap();
        // steps 1 and 3 open a collection phase: nothing can be clipped there
        assert_eq!(out.metrics[1].clipped_fraction, Some(0.0));
        assert_eq!(out.metrics[3].clipped_fraction, Some(0.0));
    }

    #[test]
    fn unfloored_kl_against_zero_reference_mass_is_a_numeric_error() {
        let mut cfg = tiny()
            .with_overrides(&[
                Override::new("variant", "grpo_kl_penalized"),
                Override::new("kl_floor", 0.0),
            ])
            .unwrap();
        cfg.model = ModelConfig {
            kind: ModelKind::Tabular,
            buckets: 1,
            context_window: 1,
            ..cfg.model
        };
        // the reference puts all its mass on EOS; the policy is uniform
        let mut r = PolicyModel::zeros(cfg.model.architecture(), crate::tasks::vocab(), 1).unwrap();
        r.params_mut().iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        r.params_mut()[crate::tasks::EOS as usize] = 0.0;
        let policy = PolicyModel::zeros(cfg.model.architecture(), crate::tasks::vocab(), 1).unwrap();
        let prompts = cfg.family().unwrap().generate_instances(2, Split::Train, 0).unwrap();
        let groups = collect_rollouts(&policy, &r, &prompts, 2, 4, 0).unwrap();
        let mode = cfg.variant.credit_mode(cfg.gate());
        let batch: Vec<PreparedGroup> = groups
            .into_iter()
            .map(|g| PreparedGroup::new(g, &mode, &cfg.advantage()).unwrap())
            .collect();
        let err = policy_gradient(&policy, &batch, &cfg.surrogate()).unwrap_err();
        assert_eq!(err.class(), "numeric");
    }
}
