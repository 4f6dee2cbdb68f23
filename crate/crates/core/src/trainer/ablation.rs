//! Ablation and sensitivity sweeps.
//!
//! A sweep spec is TOML naming the seeds and the cells. Each cell is a set
//! of overrides applied to a shared base config; `[[grid]]` entries expand
//! into one cell per value.
//!
//! ```toml
//! seeds = [0, 1, 2, 3, 4]
//!
//! [[cell]]
//! name = "no_gate"
//! set = { variant = "dgpo_no_gate" }
//!
//! [[grid]]
//! key = "tau"
//! values = [0.1, 0.5, 1.0, 5.0]
//! ```
//!
//! Every cell gets the same budget. Cells that share a seed and the same
//! task, model and reference settings share one pretrained reference.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::{build_reference, train, EvalReport};
use crate::config::{Override, TrainConfig};
use crate::policy::PolicyModel;
use crate::{Error, Result};

/// Fewest seeds a suite accepts.
pub const MIN_SEEDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub name: String,
    #[serde(default)]
    pub set: Table,
}

impl SweepCell {
    pub fn overrides(&self) -> Vec<Override> {
        let mut out = Vec::new();
        flatten(&self.set, "", &mut out);
        out
    }
}

fn flatten(t: &Table, prefix: &str, out: &mut Vec<Override>) {
    for (k, v) in t {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(sub) => flatten(sub, &key, out),
            _ => out.push(Override::new(key, v.clone())),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpec {
    key: String,
    values: Vec<Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    seeds: Vec<u64>,
    #[serde(default)]
    cell: Vec<SweepCell>,
    #[serde(default)]
    grid: Vec<GridSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

impl SweepSpec {
    /// Variant ablations plus the `kappa` and `tau` sensitivity grids.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let mut cells: Vec<SweepCell> = crate::objective::Variant::ALL
            .iter()
            .map(|v| cell(v.name(), "variant", Value::String(v.name().into())))
            .collect();
        for k in [0.0, 0.5, 1.0, 2.0, 5.0] {
            cells.push(cell(&format!("kappa={k}"), "kappa", Value::Float(k)));
        }
        for t in [0.1, 0.5, 1.0, 5.0] {
            cells.push(cell(&format!("tau={t}"), "tau", Value::Float(t)));
        }
        Self { seeds, cells }
    }
}

fn cell(name: &str, key: &str, value: Value) -> SweepCell {
    let mut set = Table::new();
    set.insert(key.into(), value);
    SweepCell { name: name.into(), set }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_sweep_spec(text: &str) -> Result<SweepSpec> {
    let raw: RawSpec =
        toml::from_str(text).map_err(|e| Error::Format(format!("sweep spec: {}", e.message().trim())))?;
    let mut cells = raw.cell;
    for g in raw.grid {
        if g.key.is_empty() || g.key.split('.').any(str::is_empty) {
            return Err(Error::Format(format!("sweep spec: malformed grid key {:?}", g.key)));
        }
        for v in g.values {
            let mut set = Table::new();
            let mut parts: Vec<&str> = g.key.split('.').collect();
            let last = parts.pop().expect("non-empty key");
            let mut leaf = Table::new();
            leaf.insert(last.into(), v.clone());
            let nested = parts.iter().rev().fold(leaf, |inner, p| {
                let mut t = Table::new();
                t.insert((*p).into(), Value::Table(inner));
                t
            });
            set.extend(nested);
            cells.push(SweepCell {
                name: format!("{}={}", g.key, value_label(&v)),
                set,
            });
        }
    }
    if raw.seeds.is_empty() {
        return Err(Error::Format("sweep spec: no seeds".into()));
    }
    if cells.is_empty() {
        return Err(Error::Format("sweep spec: no cells".into()));
    }
    let mut names = std::collections::HashSet::new();
    for c in &cells {
        if c.name.is_empty() || !names.insert(c.name.clone()) {
            return Err(Error::Format(format!(
                "sweep spec: empty or duplicate cell name {:?}",
                c.name
            )));
        }
    }
    Ok(SweepSpec {
        seeds: raw.seeds,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub overrides: String,
    /// Final evaluation per seed, in spec order; `None` for failed runs.
    pub per_seed: Vec<Option<EvalReport>>,
    pub errors: Vec<String>,
    pub median_avg: Option<f64>,
    pub median_pass: Option<f64>,
    pub median_cons: Option<f64>,
}

impl AblationRow {
    pub fn completed(&self) -> usize {
        self.per_seed.iter().flatten().count()
    }

    pub fn failed(&self) -> usize {
        self.per_seed.len() - self.completed()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }
}

/// Median of the values; the mean of the middle two for an even count.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Pretrained references keyed by everything that determines them: the
/// seed and the task, model and reference sections of the config.
#[derive(Debug, Default)]
pub struct ReferenceCache {
    models: HashMap<String, std::result::Result<PolicyModel, String>>,
}

impl ReferenceCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(cfg: &TrainConfig) -> String {
        let t = cfg.to_table();
        let part = |k: &str| t.get(k).map(|v| v.to_string()).unwrap_or_default();
        format!("{}|{}|{}|{}", cfg.seed, part("task"), part("model"), part("reference"))
    }

    /// The reference for `cfg`, pretrained on first use. A failed
    /// pretraining is cached too and reported as a setup error.
    pub fn get(&mut self, cfg: &TrainConfig) -> Result<PolicyModel> {
        self.models
            .entry(Self::key(cfg))
            .or_insert_with(|| build_reference(cfg).map(|r| r.model).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Setup)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Train every cell under every seed and report median final metrics.
///
/// A cell that fails under some seed (bad overrides, reference below its
/// floor, non-finite loss) is recorded with its error and the suite goes on.
/// `progress` is called once per finished run.
pub fn run_ablation_suite(
    base: &TrainConfig,
    spec: &SweepSpec,
    references: &mut ReferenceCache,
    mut progress: impl FnMut(&str, u64, &Result<EvalReport>),
) -> Result<AblationTable> {
    if spec.seeds.len() < MIN_SEEDS {
        return Err(Error::Input(format!(
            "an ablation suite needs at least {MIN_SEEDS} seeds, got {}",
            spec.seeds.len()
        )));
    }
    let mut results: Vec<Vec<Result<EvalReport>>> = spec.cells.iter().map(|_| Vec::new()).collect();
    for &seed in &spec.seeds {
        for (ci, cell) in spec.cells.iter().enumerate() {
            let mut overrides = cell.overrides();
            overrides.push(Override::new("seed", seed as i64));
            let run = base.with_overrides(&overrides).and_then(|cfg| {
                let reference = references.get(&cfg)?;
                train(&cfg, &reference, None).map(|o| o.final_eval)
            });
            progress(&cell.name, seed, &run);
            results[ci].push(run);
        }
    }

    let rows = spec
        .cells
        .iter()
        .zip(results)
        .map(|(cell, runs)| {
            let errors = runs
                .iter()
                .filter_map(|r| r.as_ref().err().map(|e| format!("{}: {e}", e.class())))
                .collect();
            let per_seed: Vec<Option<EvalReport>> = runs.into_iter().map(Result::ok).collect();
            let done: Vec<EvalReport> = per_seed.iter().flatten().copied().collect();
            let m = |f: fn(&EvalReport) -> f64| median(&done.iter().map(f).collect::<Vec<_>>());
            AblationRow {
                cell: cell.name.clone(),
                overrides: cell
                    .overrides()
                    .iter()
                    .map(|o| format!("{}={}", o.key, value_label(&o.value)))
                    .collect::<Vec<_>>()
                    .join(" "),
                median_avg: m(|e| e.avg),
                median_pass: m(|e| e.pass),
                median_cons: m(|e| e.cons),
                per_seed,
                errors,
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: spec.seeds.clone(),
        rows,
    })
}

pub const ABLATION_CSV_HEADER: &str =
    "cell,overrides,completed,failed,median_avg,median_pass,median_cons,per_seed_avg,errors";

pub fn write_ablation_csv<W: Write>(out: W, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    w.write_record(ABLATION_CSV_HEADER.split(',')).map_err(fmt)?;
    for r in &table.rows {
        let per_seed = r
            .per_seed
            .iter()
            .map(|e| e.map(|e| e.avg.to_string()).unwrap_or_else(|| "failed".into()))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            r.cell.clone(),
            r.overrides.clone(),
            r.completed().to_string(),
            r.failed().to_string(),
            opt(r.median_avg),
            opt(r.median_pass),
            opt(r.median_cons),
            per_seed,
            r.errors.join(" | "),
        ])
        .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn spec_with_cells_and_grids() {
        let spec = parse_sweep_spec(
            "seeds = [1, 2, 3, 4, 5]\n\
             [[cell]]\nname = \"base\"\n\
             [[cell]]\nname = \"lr\"\nset = { optimizer = { learning_rate = 0.01 }, variant = \"grpo_uniform\" }\n\
             [[grid]]\nkey = \"tau\"\nvalues = [0.1, 5.0]\n\
             [[grid]]\nkey = \"optimizer.weight_decay\"\nvalues = [0.0]\n",
        )
        .unwrap();
        let names: Vec<&str> = spec.cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            ["base", "lr", "tau=0.1", "tau=5.0", "optimizer.weight_decay=0.0"]
        );
        assert!(spec.cells[0].overrides().is_empty());
        let lr = spec.cells[1].overrides();
        assert!(lr.contains(&Override::new("optimizer.learning_rate", 0.01)));
        assert!(lr.contains(&Override::new("variant", "grpo_uniform")));
        assert_eq!(
            spec.cells[4].overrides(),
            vec![Override::new("optimizer.weight_decay", 0.0)]
        );
    }

    #[test]
    fn spec_errors() {
        for bad in [
            "",
            "seeds = []\n[[cell]]\nname = \"a\"",
            "seeds = [1]",
            "seeds = [1]\n[[cell]]\nname = \"a\"\n[[cell]]\nname = \"a\"",
            "seeds = [1]\n[[cell]]\nname = \"a\"\nbogus = 1",
            "seeds = [1]\n[[grid]]\nkey = \"a..b\"\nvalues = [1]",
        ] {
            assert!(matches!(parse_sweep_spec(bad), Err(Error::Format(_))), "{bad:?}");
        }
    }

    #[test]
    fn standard_spec_covers_the_grids() {
        let s = SweepSpec::standard(vec![0, 1, 2, 3, 4]);
        assert_eq!(s.cells.len(), 5 + 5 + 4);
    }

    #[test]
    fn suite_needs_enough_seeds() {
        let spec = SweepSpec {
            seeds: vec![0, 1],
            cells: vec![cell("a", "tau", Value::Float(1.0))],
        };
        assert!(matches!(
            run_ablation_suite(&TrainConfig::default(), &spec, &mut ReferenceCache::new(), |_, _, _| {}),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn failed_cells_are_recorded_and_the_suite_continues() {
        let mut base = TrainConfig::default();
        base.steps = 1;
        base.group_size = 2;
        base.prompts_per_batch = 1;
        base.minibatch_prompts = 1;
        base.eval_repeats = 1;
        base.eval_instances = 2;
        base.train_pool = 8;
        base.model.embed_dim = 2;
        base.model.hidden = 2;
        base.reference.corpus_size = 8;
        base.reference.epochs = 1;
        base.reference.easy_floor = 0.0;
        base.reference.eval_instances = 2;
        base.reference.eval_repeats = 1;
        let spec = SweepSpec {
            seeds: vec![0, 1, 2, 3, 4],
            cells: vec![
                cell("ok", "tau", Value::Float(1.0)),
                cell("bad", "tau", Value::Float(0.0)),
            ],
        };
        let mut calls = 0;
        let mut refs = ReferenceCache::new();
        let table = run_ablation_suite(&base, &spec, &mut refs, |_, _, _| calls += 1).unwrap();
        assert_eq!(refs.len(), 5);
        assert_eq!(calls, 10);
        let ok = table.row("ok").unwrap();
        assert_eq!((ok.completed(), ok.failed()), (5, 0));
        assert!(ok.median_avg.is_some());
        let bad = table.row("bad").unwrap();
        assert_eq!((bad.completed(), bad.failed()), (0, 5));
        assert!(bad.errors[0].starts_with("config:"));
        assert_eq!(bad.median_avg, None);

        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &table).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), ABLATION_CSV_HEADER);
        assert_eq!(text.lines().count(), 3);
    }
}
