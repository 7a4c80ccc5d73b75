//! Per-run metrics and their aggregation into a serializable report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{aggregate, auc, aucpr, f1_acc, froc, Aggregate, FrocBag, MetricError};
use crate::data::Bag;
use crate::models::BagOutput;

/// Decision threshold for slide accuracy and instance F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Metrics of one trained model on one split. Metrics that are undefined for
/// the data (single-class slides, no instance labels, no lesions) are
/// `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub slide_auc: Option<f64>,
    pub slide_acc: Option<f64>,
    pub patch_aucpr: Option<f64>,
    pub patch_f1: Option<f64>,
    pub froc: Option<f64>,
}

impl RunMetrics {
    pub const NAMES: [&'static str; 5] = ["slide_auc", "slide_acc", "patch_aucpr", "patch_f1", "froc"];

    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.slide_auc,
            self.slide_acc,
            self.patch_aucpr,
            self.patch_f1,
            self.froc,
        ]
    }
}

/// Computes every metric the data supports. Returns the metrics and notes on
/// the ones left out.
pub fn bag_metrics(
    seed: u64,
    bags: &[Bag],
    outputs: &[BagOutput],
    threshold: f64,
) -> Result<(RunMetrics, Vec<String>), MetricError> {
    if bags.len() != outputs.len() {
        return Err(MetricError::Undefined(format!(
            "{} outputs for {} bags",
            outputs.len(),
            bags.len()
        )));
    }
    let mut notes = Vec::new();
    fn keep(notes: &mut Vec<String>, r: Result<f64, MetricError>, what: &str) -> Option<f64> {
        r.map_err(|e| notes.push(format!("{what} omitted: {e}"))).ok()
    }
    let scores: Vec<f64> = outputs.iter().map(|o| o.bag_score).collect();
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let mut m = RunMetrics {
        seed,
        slide_auc: keep(&mut notes, auc(&scores, &labels), "slide_auc"),
        slide_acc: keep(&mut notes, f1_acc(&scores, &labels, threshold).map(|s| s.acc), "slide_acc"),
        ..RunMetrics::default()
    };

    if !bags.is_empty() && bags.iter().all(Bag::has_instance_labels) {
        let inst_scores: Vec<f64> = outputs.iter().flat_map(|o| o.instance_scores.iter().copied()).collect();
        let inst_labels: Vec<u8> = bags
            .iter()
            .flat_map(|b| b.instances.iter().map(|i| i.label.unwrap_or(0)))
            .collect();
        m.patch_aucpr = keep(&mut notes, aucpr(&inst_scores, &inst_labels), "patch_aucpr");
        m.patch_f1 = keep(
            &mut notes,
            f1_acc(&inst_scores, &inst_labels, threshold).map(|s| s.f1),
            "patch_f1",
        );
    } else {
        notes.push("patch metrics omitted: instance labels unavailable".into());
    }

    if !bags.is_empty() && bags.iter().all(Bag::has_localization) {
        let froc_bags: Vec<FrocBag> = bags
            .iter()
            .zip(outputs)
            .map(|(b, o)| FrocBag {
                scores: o.instance_scores.clone(),
                lesions: b.instances.iter().map(|i| i.lesion).collect(),
            })
            .collect();
        m.froc = keep(&mut notes, froc(&froc_bags), "froc");
    } else {
        notes.push("froc omitted: lesion annotations unavailable".into());
    }
    Ok((m, notes))
}

/// Mean and 95% interval per metric, present when at least two runs define
/// the metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub slide_auc: Option<Aggregate>,
    pub slide_acc: Option<Aggregate>,
    pub patch_aucpr: Option<Aggregate>,
    pub patch_f1: Option<Aggregate>,
    pub froc: Option<Aggregate>,
}

impl Aggregates {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        let agg = |f: fn(&RunMetrics) -> Option<f64>| {
            let vals: Option<Vec<f64>> = runs.iter().map(f).collect();
            vals.and_then(|v| aggregate(&v).ok())
        };
        Self {
            slide_auc: agg(|r| r.slide_auc),
            slide_acc: agg(|r| r.slide_acc),
            patch_aucpr: agg(|r| r.patch_aucpr),
            patch_f1: agg(|r| r.patch_f1),
            froc: agg(|r| r.froc),
        }
    }

    pub fn values(&self) -> [Option<Aggregate>; 5] {
        [
            self.slide_auc,
            self.slide_acc,
            self.patch_aucpr,
            self.patch_f1,
            self.froc,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub provenance: Provenance,
    pub runs: Vec<RunMetrics>,
    pub aggregate: Aggregates,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(
        model: impl Into<String>,
        split: impl Into<String>,
        provenance: Provenance,
        runs: Vec<RunMetrics>,
        mut notes: Vec<String>,
    ) -> Self {
        let aggregate = Aggregates::from_runs(&runs);
        if runs.len() < 2 {
            notes.push("confidence intervals need at least 2 seeds".into());
        }
        notes.sort();
        notes.dedup();
        Self {
            model: model.into(),
            split: split.into(),
            provenance,
            runs,
            aggregate,
            notes,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per seed, then `mean`, `ci_low` and `ci_high` rows. Missing
    /// values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,");
        out.push_str(&RunMetrics::NAMES.join(","));
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for r in &self.runs {
            let cells: Vec<String> = r.values().into_iter().map(cell).collect();
            writeln!(out, "seed-{},{}", r.seed, cells.join(",")).expect("write to String");
        }
        let aggs = self.aggregate.values();
        for (label, pick) in [
            ("mean", (|a: Aggregate| a.mean) as fn(Aggregate) -> f64),
            ("ci_low", |a: Aggregate| a.ci_low),
            ("ci_high", |a: Aggregate| a.ci_high),
        ] {
            let cells: Vec<String> = aggs.iter().map(|a| cell(a.map(pick))).collect();
            writeln!(out, "{label},{}", cells.join(",")).expect("write to String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provenance() -> Provenance {
        Provenance {
            config_hash: "c".into(),
            dataset_hash: "d".into(),
            seeds: vec![0, 1],
        }
    }

    #[test]
    fn ci_brackets_mean_and_csv_has_summary_rows() {
        let runs = vec![
            RunMetrics {
                seed: 0,
                slide_auc: Some(0.8),
                slide_acc: Some(0.7),
                ..RunMetrics::default()
            },
            RunMetrics {
                seed: 1,
                slide_auc: Some(0.9),
                slide_acc: Some(0.75),
                ..RunMetrics::default()
            },
        ];
        let r = MetricsReport::new("focusmil", "test", provenance(), runs, vec![]);
        let a = r.aggregate.slide_auc.unwrap();
        assert!(a.ci_low <= a.mean && a.mean <= a.ci_high);
        assert!(r.aggregate.patch_f1.is_none());
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("row,slide_auc,slide_acc,patch_aucpr,patch_f1,froc\nseed-0,0.8,0.7,,,\n"));
    }

    #[test]
    fn single_run_notes_missing_interval() {
        let r = MetricsReport::new("abmil", "test", provenance(), vec![RunMetrics::default()], vec![]);
        assert!(r.aggregate.slide_auc.is_none());
        assert!(r.notes.iter().any(|n| n.contains("at least 2 seeds")));
    }
}
