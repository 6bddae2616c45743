//! Multi-config, multi-seed runs in parallel with per-step aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::csvlog::{float, MetricsRow};
use crate::train::{run, write_run};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    /// Abort reason; aborted runs are left out of every aggregate.
    pub aborted: Option<String>,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub label: String,
    pub algo: String,
    pub task: String,
    pub step: usize,
    pub runs: usize,
    pub aborted_runs: usize,
    pub validation_best: f64,
    pub validation_median: f64,
    pub validation_min: f64,
    pub validation_max: f64,
    pub kl_median: f64,
    pub kl_min: f64,
    pub kl_max: f64,
}

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub runs: Vec<RunRecord>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Per-step statistics over the runs of one configuration. Steps missing from a run
/// (e.g. a shorter run) are aggregated over the runs that have them.
pub fn aggregate(label: &str, runs: &[&[MetricsRow]], aborted_runs: usize) -> Vec<AggregateRow> {
    let mut by_step: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
    for rows in runs {
        for row in rows.iter() {
            by_step.entry(row.step).or_default().push(row);
        }
    }
    by_step
        .into_iter()
        .map(|(step, rows)| {
            let val: Vec<f64> = rows.iter().map(|r| r.validation).collect();
            let kl: Vec<f64> = rows.iter().map(|r| r.kl_from_init).collect();
            let (vmin, vmax) = min_max(&val);
            let (kmin, kmax) = min_max(&kl);
            AggregateRow {
                label: label.to_string(),
                algo: rows[0].algo.clone(),
                task: rows[0].task.clone(),
                step,
                runs: rows.len(),
                aborted_runs,
                validation_best: vmax,
                validation_median: median(&val),
                validation_min: vmin,
                validation_max: vmax,
                kl_median: median(&kl),
                kl_min: kmin,
                kl_max: kmax,
            }
        })
        .collect()
}

fn unique_labels(cfgs: &[RunConfig]) -> Vec<String> {
    let labels: Vec<String> = cfgs.iter().map(RunConfig::label).collect();
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if labels.iter().filter(|x| *x == l).count() > 1 {
                format!("{l}-{i}")
            } else {
                l.clone()
            }
        })
        .collect()
}

/// Runs every `(config, seed)` pair, seeds `cfg.seed .. cfg.seed + n_seeds`, writing each
/// run under `out/<label>/seed-<seed>` plus `summary.csv` and `runs.csv` in `out`.
pub fn compare(cfgs: &[RunConfig], n_seeds: u64, out: &Path) -> Result<CompareSummary> {
    let labels = unique_labels(cfgs);
    let jobs: Vec<(String, RunConfig)> = cfgs
        .iter()
        .zip(&labels)
        .flat_map(|(cfg, label)| {
            (0..n_seeds).map(move |k| {
                let mut c = cfg.clone();
                c.seed = cfg.seed + k;
                c.out_dir = out.join(label).join(format!("seed-{}", c.seed));
                (label.clone(), c)
            })
        })
        .collect();

    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|(label, cfg)| -> Result<RunRecord> {
            let (rows, aborted) = match run(cfg) {
                Ok(result) => {
                    write_run(cfg, &result, &cfg.out_dir)?;
                    (result.rows, result.aborted.map(|a| format!("step {}: {}", a.step, a.reason)))
                }
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            Ok(RunRecord {
                label: label.clone(),
                seed: cfg.seed,
                dir: cfg.out_dir.clone(),
                aborted,
                rows,
            })
        })
        .collect::<Result<_>>()?;

    let mut aggregate_rows = Vec::new();
    for label in &labels {
        let mine: Vec<&RunRecord> = runs.iter().filter(|r| &r.label == label).collect();
        let ok: Vec<&[MetricsRow]> = mine
            .iter()
            .filter(|r| r.aborted.is_none())
            .map(|r| r.rows.as_slice())
            .collect();
        let aborted = mine.len() - ok.len();
        aggregate_rows.extend(aggregate(label, &ok, aborted));
    }

    fs::create_dir_all(out)?;
    write_summary(&out.join(SUMMARY_FILE), &aggregate_rows)?;
    let mut w = csv::Writer::from_path(out.join(RUNS_FILE))?;
    w.write_record(["label", "seed", "aborted", "reason", "dir"])?;
    for r in &runs {
        w.write_record([
            r.label.clone(),
            r.seed.to_string(),
            r.aborted.is_some().to_string(),
            r.aborted.clone().unwrap_or_default(),
            r.dir.display().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(CompareSummary {
        runs,
        aggregate: aggregate_rows,
    })
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "label",
    "algo",
    "task",
    "step",
    "runs",
    "aborted_runs",
    "validation_best",
    "validation_median",
    "validation_min",
    "validation_max",
    "kl_median",
    "kl_min",
    "kl_max",
];

fn write_summary(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.algo.clone(),
            r.task.clone(),
            r.step.to_string(),
            r.runs.to_string(),
            r.aborted_runs.to_string(),
            float(r.validation_best),
            float(r.validation_median),
            float(r.validation_min),
            float(r.validation_max),
            float(r.kl_median),
            float(r.kl_min),
            float(r.kl_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, validation: f64, kl: f64) -> MetricsRow {
        MetricsRow {
            step,
            algo: "reinforce".into(),
            task: "bandit".into(),
            seed: 0,
            mean_reward: 0.0,
            validation,
            kl_from_init: kl,
            degenerate_sequences: 0,
            per_layer: vec![],
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn single_run_aggregate_is_the_run() {
        let rows = vec![row(0, 0.25, 0.0), row(5, 0.5, 0.1)];
        let agg = aggregate("a", &[&rows], 0);
        assert_eq!(agg.len(), 2);
        for (a, r) in agg.iter().zip(&rows) {
            assert_eq!(a.validation_best, r.validation);
            assert_eq!(a.validation_median, r.validation);
            assert_eq!(a.kl_median, r.kl_from_init);
        }
    }

    #[test]
    fn best_is_elementwise_max() {
        let runs = [
            vec![row(0, 0.1, 0.0), row(5, 0.4, 0.3)],
            vec![row(0, 0.3, 0.0), row(5, 0.2, 0.1)],
            vec![row(0, 0.2, 0.0), row(5, 0.9, 0.2)],
        ];
        let refs: Vec<&[MetricsRow]> = runs.iter().map(Vec::as_slice).collect();
        let agg = aggregate("a", &refs, 1);
        assert_eq!(agg[0].validation_best, 0.3);
        assert_eq!(agg[1].validation_best, 0.9);
        assert_eq!(agg[1].validation_median, 0.4);
        assert_eq!(agg[1].validation_min, 0.2);
        assert_eq!(agg[1].kl_median, 0.2);
        assert_eq!(agg[1].aborted_runs, 1);
        assert_eq!(agg[1].runs, 3);
    }

    #[test]
    fn duplicate_labels_are_disambiguated() {
        use crate::config::{Algo, TaskKind};
        let a = RunConfig::new(TaskKind::Bandit, Algo::Reinforce);
        let b = RunConfig::new(TaskKind::Bandit, Algo::Grpo);
        assert_eq!(
            unique_labels(&[a.clone(), b, a]),
            vec!["reinforce-0".to_string(), "grpo".into(), "reinforce-2".into()]
        );
    }
}
