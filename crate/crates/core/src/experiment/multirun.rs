use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{run_seed, ExperimentSpec, SeedOutcome};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

pub const AGGREGATE_SCHEMA_VERSION: u32 = 1;

/// Metrics summarised across seeds, in output order.
pub const METRICS: [&str; 11] = [
    "ap",
    "bap",
    "nap",
    "ap50",
    "bap50",
    "nap50",
    "proposal_ar_10",
    "proposal_ar_100",
    "proposal_uar_100",
    "detection_ar_100",
    "detection_uar_100",
];

fn metric(r: &EvalReport, name: &str) -> Option<f64> {
    match name {
        "ap" => r.summary.ap,
        "bap" => r.summary.bap,
        "nap" => r.summary.nap,
        "ap50" => r.summary_50.ap,
        "bap50" => r.summary_50.bap,
        "nap50" => r.summary_50.nap,
        "proposal_ar_10" => r.proposals.all.at_10,
        "proposal_ar_100" => r.proposals.all.at_100,
        "proposal_uar_100" => r.proposals.unseen.at_100,
        "detection_ar_100" => r.detections.all.at_100,
        "detection_uar_100" => r.detections.unseen.at_100,
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `base` for the pretrained detector, otherwise the ablation tag.
    pub model: String,
    pub metric: String,
    /// One entry per seed of `Aggregate::seeds`; absent for failed seeds or
    /// undefined metrics.
    pub values: Vec<Option<f64>>,
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n − 1 denominator).
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub config_digest: String,
    /// Sorted ascending; repeated seeds are kept.
    pub seeds: Vec<u64>,
    pub complete: bool,
    pub failures: Vec<SeedFailure>,
    pub rows: Vec<AggregateRow>,
}

fn mean_std(values: &[Option<f64>]) -> (usize, Option<f64>, Option<f64>) {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    let n = xs.len();
    if n == 0 {
        return (0, None, None);
    }
    let mean = xs.iter().fold(0.0, |a, x| a + x) / n as f64;
    let std = (n >= 2).then(|| (xs.iter().fold(0.0, |a, x| a + (x - mean).powi(2)) / (n - 1) as f64).sqrt());
    (n, Some(mean), std)
}

/// Folds per-seed outcomes (already in seed order) into summary rows.
pub fn aggregate(config_digest: &str, results: &[(u64, std::result::Result<SeedOutcome, String>)]) -> Aggregate {
    let mut models: Vec<String> = vec!["base".to_string()];
    for (_, r) in results {
        if let Ok(o) = r {
            for run in &o.runs {
                if !models.contains(&run.tag) {
                    models.push(run.tag.clone());
                }
            }
        }
    }
    let report_of = |o: &SeedOutcome, model: &str| -> Option<EvalReport> {
        if model == "base" {
            o.base_report.clone()
        } else {
            o.runs.iter().find(|r| r.tag == model).and_then(|r| r.report.clone())
        }
    };
    let mut rows = Vec::new();
    for model in &models {
        let reports: Vec<Option<EvalReport>> = results
            .iter()
            .map(|(_, r)| r.as_ref().ok().and_then(|o| report_of(o, model)))
            .collect();
        for m in METRICS {
            let values: Vec<Option<f64>> = reports.iter().map(|r| r.as_ref().and_then(|r| metric(r, m))).collect();
            let (n, mean, std) = mean_std(&values);
            rows.push(AggregateRow {
                model: model.clone(),
                metric: m.to_string(),
                values,
                n,
                mean,
                std,
            });
        }
    }
    let failures: Vec<SeedFailure> = results
        .iter()
        .filter_map(|(s, r)| r.as_ref().err().map(|e| SeedFailure { seed: *s, error: e.clone() }))
        .collect();
    Aggregate {
        schema_version: AGGREGATE_SCHEMA_VERSION,
        config_digest: config_digest.to_string(),
        seeds: results.iter().map(|(s, _)| *s).collect(),
        complete: failures.is_empty(),
        failures,
        rows,
    }
}

impl Aggregate {
    pub fn row(&self, model: &str, metric: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.model == model && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("model,metric,n,mean,std\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.model, r.metric, r.n, fmt(r.mean), fmt(r.std)).expect("string write");
        }
        out
    }
}

/// Runs every seed (distinct seeds in parallel) and writes `aggregate.json`
/// and `aggregate.csv` under the output directory. A failing seed does not
/// stop the others; the aggregate then lists it and is marked incomplete.
pub fn multirun(spec: &ExperimentSpec) -> Result<Aggregate> {
    spec.validate()?;
    if spec.seeds.len() < 2 {
        return Err(Error::Config("a multi-seed run needs at least two seeds".into()));
    }
    let mut seeds = spec.seeds.clone();
    seeds.sort_unstable();
    let mut distinct = seeds.clone();
    distinct.dedup();
    let done: BTreeMap<u64, std::result::Result<SeedOutcome, String>> = distinct
        .par_iter()
        .map(|&s| (s, run_seed(spec, s).map_err(|e| e.to_string())))
        .collect();
    let results: Vec<(u64, std::result::Result<SeedOutcome, String>)> =
        seeds.iter().map(|s| (*s, done[s].clone())).collect();
    let agg = aggregate(&spec.config.digest(), &results);
    fs::create_dir_all(&spec.out)?;
    let value: serde_json::Value = serde_json::to_value(&agg)?;
    fs::write(spec.out.join("aggregate.json"), serde_json::to_string_pretty(&value)? + "\n")?;
    fs::write(spec.out.join("aggregate.csv"), agg.to_csv())?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_statistics() {
        let (n, m, s) = mean_std(&[Some(1.0), Some(2.0), None, Some(4.0)]);
        assert_eq!(n, 3);
        assert!((m.unwrap() - 7.0 / 3.0).abs() < 1e-15);
        let var = ((1.0f64 - 7.0 / 3.0).powi(2) + (2.0f64 - 7.0 / 3.0).powi(2) + (4.0f64 - 7.0 / 3.0).powi(2)) / 2.0;
        assert!((s.unwrap() - var.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[Some(0.3), Some(0.3)]), (2, Some(0.3), Some(0.0)));
        assert_eq!(mean_std(&[Some(0.3)]), (1, Some(0.3), None));
        assert_eq!(mean_std(&[None]), (0, None, None));
    }

    #[test]
    fn failed_seeds_mark_the_aggregate_incomplete() {
        let results = vec![(1, Err("boom".to_string())), (2, Err("bang".to_string()))];
        let agg = aggregate("d", &results);
        assert!(!agg.complete);
        assert_eq!(agg.failures.len(), 2);
        assert_eq!(agg.row("base", "bap").unwrap().n, 0);
        assert_eq!(agg.to_csv().lines().count(), 1 + METRICS.len());
    }
}
