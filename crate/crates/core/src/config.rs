//! Run configuration.
//!
//! A run is described by one TOML file whose keys mirror [`TrainConfig`]
//! field names, plus `key=value` overrides addressed by dotted paths
//! (`optimizer.learning_rate=3e-3`). Missing keys take their defaults, an
//! empty file is a fully defaulted config, and unknown keys are errors.
//!
//! ```toml
//! seed = 0
//! variant = "dgpo"
//! steps = 500
//! tau = 1.0
//! kappa = 1.0
//!
//! [optimizer]
//! learning_rate = 3e-3
//!
//! [task]
//! family = "modular_chain"
//! base = 5
//! difficulty = 3
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::credit::{AdvantageConfig, GateConfig, StdEstimator};
use crate::objective::{SurrogateConfig, Variant};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::policy::Architecture;
use crate::tasks::{FamilyKind, PretrainConfig, TaskFamily};
use crate::{ConfigIssue, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub family: FamilyKind,
    pub base: u32,
    pub difficulty: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: FamilyKind::ModularChain,
            base: 5,
            difficulty: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tabular,
    #[default]
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Only used by the tabular policy.
    pub buckets: usize,
    pub context_window: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            embed_dim: 8,
            hidden: 64,
            buckets: 4096,
            context_window: 5,
            init_scale: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self) -> Architecture {
        match self.kind {
            ModelKind::Tabular => Architecture::Tabular { buckets: self.buckets },
            ModelKind::Mlp => Architecture::Mlp {
                embed_dim: self.embed_dim,
                hidden: self.hidden,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            kind: d.kind,
            learning_rate: 3e-3,
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
            weight_decay: d.weight_decay,
        }
    }
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Root seed; every random stream of the run is derived from it.
    pub seed: u64,
    pub variant: Variant,
    /// Total optimization steps (one step per minibatch).
    pub steps: usize,
    /// Responses sampled per prompt.
    pub group_size: usize,
    pub prompts_per_batch: usize,
    pub minibatch_prompts: usize,
    /// Passes over each collected batch.
    pub inner_epochs: usize,
    pub max_len: usize,
    /// Distinct training prompts the batches are drawn from.
    pub train_pool: usize,
    /// Evaluate every this many steps, and always at the last step.
    pub eval_every: usize,
    pub eval_repeats: usize,
    pub eval_instances: usize,
    pub eval_temperature: f64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Also write the per-token credit of every collected batch.
    pub export_rollouts: bool,
    pub tau: f64,
    pub kappa: f64,
    /// Stabilizer in the advantage denominator.
    pub epsilon: f64,
    pub std_estimator: StdEstimator,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Floor on reference probabilities in every KL computation; 0 disables it.
    pub kl_floor: f64,
    pub optimizer: OptimizerSection,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub reference: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::Dgpo,
            steps: 500,
            group_size: 8,
            prompts_per_batch: 32,
            minibatch_prompts: 8,
            inner_epochs: 1,
            max_len: 32,
            train_pool: 4096,
            eval_every: 50,
            eval_repeats: 16,
            eval_instances: 64,
            eval_temperature: 1.0,
            checkpoint_every: 0,
            export_rollouts: false,
            tau: 1.0,
            kappa: 1.0,
            epsilon: 1e-6,
            std_estimator: StdEstimator::Population,
            clip_eps: 0.2,
            kl_beta: 0.04,
            kl_floor: crate::divergence::DEFAULT_KL_FLOOR,
            optimizer: OptimizerSection::default(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            reference: PretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn family(&self) -> Result<TaskFamily> {
        TaskFamily::new(self.task.family, self.task.base, self.task.difficulty)
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig {
            kappa: self.kappa,
            tau: self.tau,
            kl_floor: self.kl_floor,
            ..GateConfig::default()
        }
    }

    pub fn advantage(&self) -> AdvantageConfig {
        AdvantageConfig {
            epsilon: self.epsilon,
            estimator: self.std_estimator,
        }
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            kl_floor: self.kl_floor,
            variant: self.variant,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = self.optimizer;
        OptimizerConfig {
            kind: o.kind,
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }

    /// Every invariant violation, each addressed by its key path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut check = |ok: bool, key: &str, msg: &str| {
            if !ok {
                out.push(ConfigIssue {
                    key: key.into(),
                    message: msg.into(),
                });
            }
        };
        check(self.seed <= i64::MAX as u64, "seed", "must be <= 2^63 - 1");
        check(self.group_size >= 2, "group_size", "must be >= 2");
        check(self.prompts_per_batch >= 1, "prompts_per_batch", "must be >= 1");
        check(self.minibatch_prompts >= 1, "minibatch_prompts", "must be >= 1");
        check(
            self.minibatch_prompts <= self.prompts_per_batch,
            "minibatch_prompts",
            "must be <= prompts_per_batch",
        );
        check(self.inner_epochs >= 1, "inner_epochs", "must be >= 1");
        check(self.max_len >= 1, "max_len", "must be >= 1");
        check(self.train_pool >= 1, "train_pool", "must be >= 1");
        check(self.eval_every >= 1, "eval_every", "must be >= 1");
        check(self.eval_repeats >= 1, "eval_repeats", "must be >= 1");
        check(self.eval_instances >= 1, "eval_instances", "must be >= 1");
        check(positive(self.eval_temperature), "eval_temperature", "must be > 0");
        check(positive(self.tau), "tau", "must be > 0");
        check(self.kappa >= 0.0 && self.kappa.is_finite(), "kappa", "must be >= 0");
        check(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            "epsilon",
            "must be >= 0",
        );
        check(
            self.clip_eps > 0.0 && self.clip_eps < 1.0,
            "clip_eps",
            "must be in (0, 1)",
        );
        check(
            self.kl_beta >= 0.0 && self.kl_beta.is_finite(),
            "kl_beta",
            "must be >= 0",
        );
        check(
            self.kl_floor >= 0.0 && self.kl_floor < 1.0,
            "kl_floor",
            "must be in [0, 1)",
        );

        let o = &self.optimizer;
        check(positive(o.learning_rate), "optimizer.learning_rate", "must be > 0");
        check((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must be in [0, 1)");
        check((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must be in [0, 1)");
        check(positive(o.eps), "optimizer.eps", "must be > 0");
        check(
            o.weight_decay >= 0.0 && o.weight_decay.is_finite(),
            "optimizer.weight_decay",
            "must be >= 0",
        );

        let t = &self.task;
        check(
            (2..=crate::tasks::MAX_BASE).contains(&t.base),
            "task.base",
            "must be in 2..=10",
        );
        check(t.difficulty >= 1, "task.difficulty", "must be >= 1");
        if let Ok(f) = self.family() {
            check(
                self.max_len >= f.response_len(),
                "max_len",
                "must cover the ground-truth response length",
            );
        }

        let m = &self.model;
        check(m.context_window >= 1, "model.context_window", "must be >= 1");
        check(positive(m.init_scale), "model.init_scale", "must be > 0");
        match m.kind {
            ModelKind::Mlp => {
                check(m.embed_dim >= 1, "model.embed_dim", "must be >= 1");
                check(m.hidden >= 1, "model.hidden", "must be >= 1");
            }
            ModelKind::Tabular => check(m.buckets >= 1, "model.buckets", "must be >= 1"),
        }

        let r = &self.reference;
        check(r.batch_size >= 1, "reference.batch_size", "must be >= 1");
        check(r.corpus_size >= 1, "reference.corpus_size", "must be >= 1");
        check(
            (0.0..=1.0).contains(&r.correct_rate),
            "reference.correct_rate",
            "must be in [0, 1]",
        );
        check(positive(r.learning_rate), "reference.learning_rate", "must be > 0");
        check(
            (0.0..=1.0).contains(&r.easy_floor),
            "reference.easy_floor",
            "must be in [0, 1]",
        );
        check(r.eval_instances >= 1, "reference.eval_instances", "must be >= 1");
        check(r.eval_repeats >= 1, "reference.eval_repeats", "must be >= 1");
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn to_table(&self) -> Table {
        match Value::try_from(self) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        }
    }

    /// The fully resolved config as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_table()).expect("config tables serialize")
    }

    /// Hex SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Apply overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[Override]) -> Result<Self> {
        resolve(self.to_table(), overrides)
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

/// One `key=value` override. The value is parsed as a TOML value and taken
/// as a bare string when it does not parse.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| Error::config(text, "override must look like key=value"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(Error::config(key, "malformed override key"));
        }
        let raw = raw.trim();
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Self {
            key: key.to_string(),
            value,
        })
    }
}

pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::config("<file>", e.message().to_string()))
}

/// Parse and resolve config text.
pub fn from_str(text: &str, overrides: &[Override]) -> Result<TrainConfig> {
    resolve(parse_table(text)?, overrides)
}

/// Read, parse and resolve a config file.
pub fn load(path: impl AsRef<Path>, overrides: &[Override]) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    from_str(&text, overrides)
}

/// Apply overrides to `table`, reject unknown keys, fill defaults and check
/// invariants. All problems found are reported together.
pub fn resolve(mut table: Table, overrides: &[Override]) -> Result<TrainConfig> {
    let mut issues = Vec::new();
    for o in overrides {
        if let Err(issue) = set_path(&mut table, &o.key, o.value.clone()) {
            issues.push(issue);
        }
    }
    let defaults = TrainConfig::default().to_table();
    unknown_keys(&table, &defaults, "", &mut issues);
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }

    let mut merged = defaults.clone();
    merge(&mut merged, &table);
    let cfg = match Value::Table(merged).try_into::<TrainConfig>() {
        Ok(cfg) => cfg,
        Err(whole) => {
            // Retry one leaf at a time to name the offending keys.
            let mut leaves = Vec::new();
            collect_leaves(&table, "", &mut leaves);
            for (key, value) in leaves {
                let mut trial = defaults.clone();
                set_path(&mut trial, &key, value).ok();
                if let Err(e) = Value::Table(trial).try_into::<TrainConfig>() {
                    issues.push(ConfigIssue {
                        key,
                        message: e.message().trim().to_string(),
                    });
                }
            }
            if issues.is_empty() {
                issues.push(ConfigIssue {
                    key: "<config>".into(),
                    message: whole.message().trim().to_string(),
                });
            }
            return Err(Error::Config(issues));
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn set_path(table: &mut Table, key: &str, value: Value) -> std::result::Result<(), ConfigIssue> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigIssue {
            key: parts[..=i].join("."),
            message: "is not a section".into(),
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn unknown_keys(table: &Table, schema: &Table, prefix: &str, issues: &mut Vec<ConfigIssue>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match schema.get(k) {
            None => issues.push(ConfigIssue {
                key: path,
                message: "unknown key".into(),
            }),
            Some(Value::Table(sub)) => match v {
                Value::Table(t) => unknown_keys(t, sub, &path, issues),
                _ => issues.push(ConfigIssue {
                    key: path,
                    message: "expected a section".into(),
                }),
            },
            Some(_) => {
                if v.is_table() {
                    issues.push(ConfigIssue {
                        key: path,
                        message: "expected a value, found a section".into(),
                    });
                }
            }
        }
    }
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn collect_leaves(table: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => collect_leaves(t, &path, out),
            _ => out.push((path, v.clone())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(err: Error) -> Vec<String> {
        match err {
            Error::Config(issues) => issues.into_iter().map(|i| i.key).collect(),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn empty_file_is_fully_defaulted() {
        assert_eq!(from_str("", &[]).unwrap(), TrainConfig::default());
    }

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let d = TrainConfig::default();
        d.validate().unwrap();
        assert_eq!(from_str(&d.to_toml(), &[]).unwrap(), d);
    }

    #[test]
    fn zero_tau_names_tau() {
        let err = from_str("tau = 0.0", &[]).unwrap_err();
        assert!(err.to_string().contains("tau: must be > 0"), "{err}");
    }

    #[test]
    fn negative_kappa_names_kappa() {
        let err = from_str("kappa = -1.0", &[]).unwrap_err();
        assert!(err.to_string().contains("kappa: must be >= 0"), "{err}");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = from_str("taus = 1.0\n[optimizer]\nlr = 1.0\n[nope]\nx = 1", &[]).unwrap_err();
        let mut k = keys(err);
        k.sort();
        assert_eq!(k, ["nope", "optimizer.lr", "taus"]);
    }

    #[test]
    fn type_errors_name_the_leaf() {
        let err = from_str("steps = \"many\"\n[task]\nbase = 7\nfamily = \"chess\"", &[]).unwrap_err();
        let mut k = keys(err);
        k.sort();
        assert_eq!(k, ["steps", "task.family"]);
    }

    #[test]
    fn several_invariant_violations_are_reported_together() {
        let err = from_str("tau = 0.0\nkappa = -1.0\ngroup_size = 1", &[]).unwrap_err();
        assert_eq!(keys(err).len(), 3);
    }

    #[test]
    fn overrides_apply_over_the_file() {
        let o = [
            Override::parse("optimizer.learning_rate=3e-3").unwrap(),
            Override::parse("variant=grpo_uniform").unwrap(),
            Override::parse("tau = 0.5").unwrap(),
        ];
        let cfg = from_str("tau = 2.0", &o).unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 3e-3);
        assert_eq!(cfg.variant, Variant::GrpoUniform);
        assert_eq!(cfg.tau, 0.5);
    }

    #[test]
    fn bad_overrides() {
        assert!(Override::parse("tau").is_err());
        assert!(Override::parse("a..b=1").is_err());
        assert_eq!(
            keys(from_str("", &[Override::parse("nope.x=1").unwrap()]).unwrap_err()),
            ["nope"]
        );
        assert_eq!(
            keys(from_str("", &[Override::parse("tau.x=1").unwrap()]).unwrap_err()),
            ["tau"]
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = a.with_overrides(&[Override::new("tau", 0.5)]).unwrap();
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn syntax_errors_are_config_errors() {
        assert_eq!(keys(from_str("tau = = 1", &[]).unwrap_err()), ["<file>"]);
    }
}
