//! Seeded grid search over dotted-key hyperparameter axes and its two
//! summaries: the per-seed best cell averaged over seeds, and the single cell
//! with the best average across seeds.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{run_experiment, RunRecord};
use crate::harness::records::RecordStore;
use crate::metrics::{aggregate, mean, AggregatedReport, OodReport, Summary};

/// Named axes, each a list of values for one dotted config key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: BTreeMap<String, Vec<Value>>,
}

impl GridSpec {
    pub fn axis(mut self, key: &str, values: Vec<Value>) -> Self {
        self.axes.insert(key.to_string(), values);
        self
    }
}

fn floats(v: &[f64]) -> Vec<Value> {
    v.iter().map(|&x| Value::Float(x)).collect()
}

fn ints(v: &[i64]) -> Vec<Value> {
    v.iter().map(|&x| Value::Integer(x)).collect()
}

/// LL-HMC search space: prior std, burn-in, target acceptance, chains and
/// retained sample count.
pub fn default_llhmc_grid() -> GridSpec {
    GridSpec::default()
        .axis("prior_std", floats(&[0.01, 0.1, 1.0, 2.5, 5.0, 10.0]))
        .axis("sampler.burn_in", ints(&[10, 25, 50, 100, 200]))
        .axis("sampler.target_accept", floats(&[0.6, 0.7, 0.8]))
        .axis("sampler.chains", ints(&[1, 2]))
        .axis("sampler.samples", ints(&[2, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50]))
}

/// Search space of the optimizer-based baselines.
pub fn default_baseline_grid(section: &str) -> GridSpec {
    GridSpec::default()
        .axis("n_members", ints(&[5, 10, 15, 20, 25, 30, 35, 40, 45, 50]))
        .axis(&format!("{section}.optimizer.batch_size"), ints(&[16, 32, 64]))
        .axis(
            &format!("{section}.optimizer.learning_rate"),
            floats(&[1e-2, 1e-3, 1e-4]),
        )
        .axis(&format!("{section}.optimizer.epochs"), ints(&[5, 10, 15, 20, 25]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    /// `key=value` pairs joined by `;` in key order.
    pub key: String,
    pub overrides: Vec<(String, Value)>,
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cartesian product of the axes, last axis varying fastest.
pub fn expand(spec: &GridSpec) -> Result<Vec<GridCell>> {
    if spec.axes.is_empty() || spec.axes.values().any(Vec::is_empty) {
        return Err(Error::Config("grid axes must be non-empty".into()));
    }
    let mut cells = vec![Vec::<(String, Value)>::new()];
    for (k, values) in &spec.axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    Ok(cells
        .into_iter()
        .map(|overrides| GridCell {
            key: overrides
                .iter()
                .map(|(k, v)| format!("{k}={}", render(v)))
                .collect::<Vec<_>>()
                .join(";"),
            overrides,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodAggregate {
    pub roc_auc: Summary,
    pub pr_auc: Summary,
    pub fpr95: Summary,
}

fn aggregate_ood(reports: &[OodReport]) -> Option<OodAggregate> {
    if reports.is_empty() {
        return None;
    }
    let col = |f: fn(&OodReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
    Some(OodAggregate {
        roc_auc: col(|r| r.roc_auc),
        pr_auc: col(|r| r.pr_auc),
        fpr95: col(|r| r.fpr95),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    /// Best cell of every seed, ascending by seed.
    pub per_seed_best: Vec<(u64, String)>,
    pub summary_a: AggregatedReport,
    pub summary_a_ood: Option<OodAggregate>,
    /// Cell with the best mean F1 over the seeds that completed it for every
    /// seed.
    pub best_cell: String,
    pub summary_b: AggregatedReport,
    pub summary_b_ood: Option<OodAggregate>,
}

/// Higher F1 first, then lower ACE, then cell key.
fn rank(f1_a: f64, ace_a: f64, key_a: &str, f1_b: f64, ace_b: f64, key_b: &str) -> Ordering {
    f1_b.total_cmp(&f1_a)
        .then(ace_a.total_cmp(&ace_b))
        .then_with(|| key_a.cmp(key_b))
}

/// Both summaries as a pure function of the records.
pub fn summarize(records: &[RunRecord]) -> Result<GridSummary> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("no records to summarize".into()));
    }
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    let mut per_seed_best = Vec::new();
    let mut best_records = Vec::new();
    for &seed in &seeds {
        let best = records
            .iter()
            .filter(|r| r.seed == seed)
            .min_by(|a, b| {
                rank(
                    a.evaluation.f1,
                    a.evaluation.ace,
                    &a.cell,
                    b.evaluation.f1,
                    b.evaluation.ace,
                    &b.cell,
                )
            })
            .expect("seed has records");
        per_seed_best.push((seed, best.cell.clone()));
        best_records.push(best);
    }

    let mut by_cell: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_cell.entry(r.cell.as_str()).or_default().push(r);
    }
    let complete: Vec<(&str, f64, f64)> = by_cell
        .iter()
        .filter(|(_, rs)| rs.iter().map(|r| r.seed).collect::<BTreeSet<_>>() == seeds)
        .map(|(cell, rs)| {
            let f1 = mean(&rs.iter().map(|r| r.evaluation.f1).collect::<Vec<_>>());
            let ace = mean(&rs.iter().map(|r| r.evaluation.ace).collect::<Vec<_>>());
            (*cell, f1, ace)
        })
        .collect();
    let (best_cell, _, _) = complete
        .iter()
        .min_by(|a, b| rank(a.1, a.2, a.0, b.1, b.2, b.0))
        .copied()
        .ok_or_else(|| Error::UndefinedMetric("no cell completed for every seed".into()))?;
    let mut b_records = by_cell[best_cell].clone();
    b_records.sort_by_key(|r| r.seed);

    let evals = |rs: &[&RunRecord]| aggregate(&rs.iter().map(|r| r.evaluation).collect::<Vec<_>>());
    let oods = |rs: &[&RunRecord]| aggregate_ood(&rs.iter().filter_map(|r| r.ood).collect::<Vec<_>>());
    Ok(GridSummary {
        per_seed_best,
        summary_a: evals(&best_records)?,
        summary_a_ood: oods(&best_records),
        best_cell: best_cell.to_string(),
        summary_b: evals(&b_records)?,
        summary_b_ood: oods(&b_records),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    /// Cell-major, seed-minor.
    pub records: Vec<RunRecord>,
    pub failures: Vec<CellFailure>,
    pub summary: Option<GridSummary>,
}

/// Runs every `(cell, seed)` pair. Pairs already in `store` are loaded
/// instead of rerun; new records are persisted as they finish. A failing
/// pair is reported without stopping the sweep.
pub fn grid_search(
    base: &ExperimentConfig,
    spec: &GridSpec,
    seeds: &[u64],
    store: Option<&RecordStore>,
) -> Result<GridOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let cells = expand(spec)?;
    let configs = cells
        .iter()
        .map(|c| base.with_overrides(&c.overrides).map(|cfg| (c.key.clone(), cfg)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let results: Vec<std::result::Result<RunRecord, CellFailure>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (key, cfg) = &configs[c];
            let fail = |e: Error| CellFailure {
                cell: key.clone(),
                seed,
                error: e.to_string(),
            };
            if let Some(store) = store {
                if let Some(r) = store.load(&cfg.run_hash(seed)).map_err(fail)? {
                    return Ok(r);
                }
            }
            let mut record = run_experiment(cfg, seed).map_err(fail)?;
            record.cell = key.clone();
            if let Some(store) = store {
                store.save(&record).map_err(fail)?;
            }
            Ok(record)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let summary = summarize(&records).ok();
    Ok(GridOutcome {
        records,
        failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_space_matches_published_sets() {
        let g = default_llhmc_grid();
        assert_eq!(g.axes["prior_std"], floats(&[0.01, 0.1, 1.0, 2.5, 5.0, 10.0]));
        assert_eq!(g.axes["sampler.burn_in"], ints(&[10, 25, 50, 100, 200]));
        assert_eq!(g.axes["sampler.target_accept"], floats(&[0.6, 0.7, 0.8]));
        assert_eq!(g.axes["sampler.chains"], ints(&[1, 2]));
        assert_eq!(g.axes["sampler.samples"].len(), 11);
        assert_eq!(expand(&g).unwrap().len(), 6 * 5 * 3 * 2 * 11);
    }

    #[test]
    fn expansion_order_and_keys() {
        let g = GridSpec::default()
            .axis("a", ints(&[1, 2]))
            .axis("b.c", vec![Value::String("x".into()), Value::String("y".into())]);
        let keys: Vec<String> = expand(&g).unwrap().into_iter().map(|c| c.key).collect();
        assert_eq!(keys, vec!["a=1;b.c=x", "a=1;b.c=y", "a=2;b.c=x", "a=2;b.c=y"]);
        assert!(expand(&GridSpec::default()).is_err());
        assert!(expand(&GridSpec::default().axis("a", vec![])).is_err());
    }
}
