//! Slide- and instance-level evaluation metrics.

mod report;

pub use report::{
    bag_metrics, Aggregates, MetricsReport, Provenance, RunMetrics, DEFAULT_THRESHOLD,
};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Undefined(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined("NaN score".into()));
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks, so
/// a tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let idx = ascending(scores);
    // Twice the positive rank sum keeps midranks integral.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += mid2 * pos;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: Σ (Rₖ − Rₖ₋₁)·Pₖ over distinct score thresholds in
/// decreasing order, predicting positive when `score ≥ threshold`.
pub fn aucpr(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("AUCPR needs at least one positive".into()));
    }
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryStats {
    pub f1: f64,
    pub acc: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Confusion-matrix metrics at `threshold` (`score ≥ threshold` is positive).
/// Precision, recall and F1 are 0 when their denominators are.
pub fn f1_acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryStats, MetricError> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::Undefined("no scores".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryStats {
        f1,
        acc: ratio(tp + tn, scores.len()),
        precision,
        recall,
    })
}

/// False-positive-per-bag rates at which FROC sensitivity is averaged.
pub const FROC_RATES: [f64; 6] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Scored instances of one bag with their lesion ids (`None` outside
/// lesions).
#[derive(Clone, Debug, PartialEq)]
pub struct FrocBag {
    pub scores: Vec<f64>,
    pub lesions: Vec<Option<u32>>,
}

/// Sensitivity at each rate in [`FROC_RATES`].
///
/// Operating points are the distinct positive instance scores; at threshold
/// `t` every instance with `score ≥ t` is flagged. A lesion is detected when
/// any of its instances is flagged; each flagged instance outside a lesion
/// is one false positive. The sensitivity at a rate is the best one among
/// operating points whose false positives per bag do not exceed it.
pub fn froc_curve(bags: &[FrocBag]) -> Result<[f64; 6], MetricError> {
    if bags.is_empty() {
        return Err(MetricError::Undefined("FROC needs at least one bag".into()));
    }
    // (score, bag, lesion) for every instance; lesion None means a FP.
    let mut items: Vec<(f64, usize, Option<u32>)> = Vec::new();
    let mut lesion_ids = std::collections::BTreeSet::new();
    for (b, bag) in bags.iter().enumerate() {
        if bag.scores.len() != bag.lesions.len() {
            return Err(MetricError::Undefined(format!("bag {b}: scores and lesions differ in length")));
        }
        for (&s, &l) in bag.scores.iter().zip(&bag.lesions) {
            if s.is_nan() {
                return Err(MetricError::Undefined("NaN score".into()));
            }
            if let Some(id) = l {
                lesion_ids.insert((b, id));
            }
            if s > 0.0 {
                items.push((s, b, l));
            }
        }
    }
    if lesion_ids.is_empty() {
        return Err(MetricError::Undefined("FROC needs at least one lesion".into()));
    }
    items.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_bags = bags.len() as f64;
    let n_lesions = lesion_ids.len() as f64;
    let mut detected = std::collections::BTreeSet::new();
    let mut fps = 0usize;
    // (fp per bag, sensitivity); the empty operating point is (0, 0).
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < items.len() {
        let t = items[i].0;
        while i < items.len() && items[i].0 == t {
            match items[i].2 {
                Some(id) => {
                    detected.insert((items[i].1, id));
                }
                None => fps += 1,
            }
            i += 1;
        }
        points.push((fps as f64 / n_bags, detected.len() as f64 / n_lesions));
    }
    Ok(FROC_RATES.map(|rate| {
        points
            .iter()
            .filter(|(fp, _)| *fp <= rate)
            .map(|&(_, s)| s)
            .fold(0.0, f64::max)
    }))
}

/// Mean sensitivity over [`FROC_RATES`].
pub fn froc(bags: &[FrocBag]) -> Result<f64, MetricError> {
    let curve = froc_curve(bags)?;
    Ok(curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Mean with a two-sided 95% Student-t interval over runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn half_width(&self) -> f64 {
        (self.ci_high - self.ci_low) / 2.0
    }
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate, MetricError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricError::Aggregation(format!(
            "a confidence interval needs at least 2 runs, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::Aggregation("non-finite run value".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        let v = values[0];
        return Ok(Aggregate {
            mean: v,
            ci_low: v,
            ci_high: v,
            std: 0.0,
            n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * std / (n as f64).sqrt();
    Ok(Aggregate {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        std,
        n,
    })
}
