//! `dgpo` command-line driver.
//!
//! Every verb writes its artifacts, the resolved config and a `run.json`
//! provenance record into `--out`. On failure it prints one line
//! `error class=<class> message=<json string>` to stderr, writes
//! `error.json` into `--out` and exits with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgpo::checkpoint;
use dgpo::config::{self, Override, TrainConfig};
use dgpo::credit::{credit_records, write_credit_jsonl};
use dgpo::objective::{gradient_stability_probe, write_probe_csv, PreparedGroup, ProbeConfig, Variant};
use dgpo::tasks::{read_instances_jsonl, Split};
use dgpo::trainer::{self, SweepSpec};
use dgpo::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(name = "dgpo", version, about = "Distribution-guided policy optimization laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a pretrained (or given) reference.
    Train {
        #[command(flatten)]
        common: Common,
        /// Reference checkpoint; pretrained from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Gradient norms of the KL-penalized and distribution-guided objectives
    /// as the reference probability of an explored token goes to zero.
    ProbeGradients {
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation and sensitivity sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Sweep spec; the standard variant, kappa and tau sweep when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Export per-token credit for rollouts of a checkpoint.
    ExportCredit {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reference checkpoint; the policy itself when omitted.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Instance set as JSON lines; training instances when omitted.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Number of prompts when instances are generated.
        #[arg(long, default_value_t = 8)]
        prompts: usize,
    },
    /// Pretrain and freeze a reference policy.
    PretrainRef {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.learning_rate=3e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<String>,
}

impl Common {
    fn config(&self) -> Result<TrainConfig> {
        let mut overrides = self
            .set
            .iter()
            .map(|s| Override::parse(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| Error::Input(format!("seed {seed} exceeds 2^63 - 1")))?;
            overrides.push(Override::new("seed", seed));
        }
        if let Some(v) = &self.variant {
            if Variant::parse(v).is_none() {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                return Err(Error::Input(format!(
                    "unknown variant {v:?}; expected one of {}",
                    names.join(", ")
                )));
            }
            overrides.push(Override::new("variant", v.as_str()));
        }
        match &self.config {
            Some(p) => config::load(p, &overrides),
            None => config::from_str("", &overrides),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: PathBuf, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, text).map_err(|source| Error::File { path, source })
}

fn write_json(path: PathBuf, value: &serde_json::Value) -> Result<()> {
    write(
        path,
        serde_json::to_string_pretty(value).expect("json values serialize") + "\n",
    )
}

/// Resolved config and provenance next to the artifacts.
fn provenance(out: &Path, verb: &str, cfg: &TrainConfig) -> Result<()> {
    create_dir(out)?;
    write(out.join("config.toml"), cfg.to_toml())?;
    write_json(
        out.join("run.json"),
        &json!({
            "verb": verb,
            "build": trainer::BUILD_ID,
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
        }),
    )
}

fn reference_for(cfg: &TrainConfig, path: Option<&Path>, out: &Path) -> Result<dgpo::policy::PolicyModel> {
    match path {
        Some(p) => checkpoint::load(p),
        None => {
            let r = trainer::build_reference(cfg)?;
            write_json(
                out.join("reference.json"),
                &json!({
                    "easy_accuracy": r.easy_accuracy,
                    "hard_accuracy": r.hard_accuracy,
                    "final_nll": r.final_nll,
                }),
            )?;
            eprintln!(
                "reference: easy {:.3} hard {:.3} nll {:.4}",
                r.easy_accuracy, r.hard_accuracy, r.final_nll
            );
            Ok(r.model)
        }
    }
}

fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train { common, checkpoint } => {
            let cfg = common.config()?;
            provenance(&common.out, "train", &cfg)?;
            let reference = reference_for(&cfg, checkpoint.as_deref(), &common.out)?;
            let out = trainer::train(&cfg, &reference, Some(&common.out))?;
            let e = out.final_eval;
            println!(
                "final avg@{} {:.4} pass@{} {:.4} cons@{} {:.4}",
                e.k, e.avg, e.k, e.pass, e.k, e.cons
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.config()?;
            provenance(&common.out, "eval", &cfg)?;
            let model = checkpoint::load(checkpoint)?;
            let instances = trainer::eval_instances(&cfg)?;
            // same stream as the final evaluation of a run with this config
            let e = trainer::evaluate_at(&model, &cfg, &instances, cfg.steps)?;
            write_json(
                common.out.join("eval.json"),
                &serde_json::to_value(e).expect("report serializes"),
            )?;
            println!(
                "avg@{} {:.4} pass@{} {:.4} cons@{} {:.4}",
                e.k, e.avg, e.k, e.pass, e.k, e.cons
            );
        }
        Command::ProbeGradients { common } => {
            let cfg = common.config()?;
            provenance(&common.out, "probe-gradients", &cfg)?;
            let probe = ProbeConfig {
                kl_beta: if cfg.kl_beta > 0.0 {
                    cfg.kl_beta
                } else {
                    ProbeConfig::default().kl_beta
                },
                kl_floor: cfg.kl_floor,
                clip_eps: cfg.clip_eps,
                gate: cfg.gate(),
                ..ProbeConfig::default()
            };
            let rows = gradient_stability_probe(&probe)?;
            let path = common.out.join("probe.csv");
            let file = fs::File::create(&path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            write_probe_csv(file, &rows)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Ablate { common, spec } => {
            let cfg = common.config()?;
            provenance(&common.out, "ablate", &cfg)?;
            let spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|source| Error::File {
                        path: p.clone(),
                        source,
                    })?;
                    trainer::parse_sweep_spec(&text)?
                }
                None => SweepSpec::standard((0..trainer::MIN_SEEDS as u64).map(|s| cfg.seed + s).collect()),
            };
            let table = trainer::run_ablation_suite(
                &cfg,
                &spec,
                &mut trainer::ReferenceCache::new(),
                |cell, seed, r| match r {
                    Ok(e) => eprintln!("{cell} seed {seed}: avg {:.4}", e.avg),
                    Err(e) => eprintln!("{cell} seed {seed}: failed ({})", e.class()),
                },
            )?;
            let path = common.out.join("ablation.csv");
            let file = fs::File::create(&path).map_err(|source| Error::File {
                path: path.clone(),
                source,
            })?;
            trainer::write_ablation_csv(file, &table)?;
            write_json(
                common.out.join("ablation.json"),
                &serde_json::to_value(&table).expect("table serializes"),
            )?;
            println!("{} cells -> {}", table.rows.len(), path.display());
        }
        Command::ExportCredit {
            common,
            checkpoint: policy_path,
            reference,
            instances,
            prompts,
        } => {
            let cfg = common.config()?;
            provenance(&common.out, "export-credit", &cfg)?;
            let policy = checkpoint::load(policy_path)?;
            let reference = match reference {
                Some(p) => checkpoint::load(p)?,
                None => policy.clone(),
            };
            let instances = match instances {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|source| Error::File {
                        path: p.clone(),
                        source,
                    })?;
                    read_instances_jsonl(&text)?
                }
                None => cfg.family()?.generate_instances(*prompts, Split::Train, cfg.seed)?,
            };
            let seed = dgpo::seed::derive(cfg.seed, &[dgpo::seed::stream::ROLLOUT]);
            let groups = trainer::collect_rollouts(&policy, &reference, &instances, cfg.group_size, cfg.max_len, seed)?;
            let mode = cfg.variant.credit_mode(cfg.gate());
            let mut records = Vec::new();
            for (i, g) in groups.into_iter().enumerate() {
                let p = PreparedGroup::new(g, &mode, &cfg.advantage())?;
                records.extend(credit_records(i, &p.rollout, &p.credit));
            }
            let path = common.out.join("credit.jsonl");
            let mut buf = Vec::new();
            write_credit_jsonl(&mut buf, &records).expect("writing to memory");
            write(path.clone(), buf)?;
            println!("{} sequences -> {}", records.len(), path.display());
        }
        Command::PretrainRef { common } => {
            let cfg = common.config()?;
            provenance(&common.out, "pretrain-ref", &cfg)?;
            let model = reference_for(&cfg, None, &common.out)?;
            let path = common.out.join("reference.ckpt");
            checkpoint::save(&model, &path)?;
            println!("reference -> {}", path.display());
        }
    }
    Ok(())
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::ProbeGradients { common }
        | Command::Ablate { common, .. }
        | Command::ExportCredit { common, .. }
        | Command::PretrainRef { common } => &common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string();
            let mut detail = json!({ "class": e.class(), "message": message });
            if let Error::Config(issues) = &e {
                detail["issues"] = issues
                    .iter()
                    .map(|i| json!({ "key": i.key, "message": i.message }))
                    .collect();
            }
            let out = out_dir(&cli.command);
            if let Err(w) = create_dir(out).and_then(|()| write_json(out.join("error.json"), &detail)) {
                eprintln!("could not write error artifact: {w}");
            }
            eprintln!(
                "error class={} message={}",
                e.class(),
                serde_json::Value::String(message)
            );
            ExitCode::FAILURE
        }
    }
}
