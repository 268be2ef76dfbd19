//! Stay-level evaluation: AUROC, DeLong's paired test, FPR-matched
//! thresholds, detection lead times and coefficient-contribution traces.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::cohort::BIN_MINUTES;
use crate::encoder::EncodedStay;
use crate::error::{Error, Result};
use crate::lasso::{self, FitOptions};
use crate::stats;

/// One stay's score series over its eligible bins, aggregated by maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayScore {
    pub stay_id: String,
    pub positive: bool,
    pub event_time: Option<u32>,
    pub bins: Vec<u32>,
    pub series: Vec<f64>,
    pub stay_level: f64,
}

impl StayScore {
    /// `bins`/`series` must already be restricted to eligible bins.
    pub fn new(stay_id: &str, positive: bool, event_time: Option<u32>, bins: Vec<u32>, series: Vec<f64>) -> Self {
        let stay_level = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            stay_id: stay_id.to_string(),
            positive,
            event_time,
            bins,
            series,
            stay_level,
        }
    }
}

fn split_classes(scores: &[f64], labels: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::data("scores and labels differ in length"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| !y).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::data("AUC needs at least one positive and one negative stay"));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: P(pos > neg) + ½ P(tie).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let ranks = stats::midranks(&all);
    let rank_sum: f64 = ranks[..pos.len()].iter().sum();
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

pub fn stay_auc(stays: &[StayScore]) -> Result<f64> {
    let scores: Vec<f64> = stays.iter().map(|s| s.stay_level).collect();
    let labels: Vec<bool> = stays.iter().map(|s| s.positive).collect();
    auc(&scores, &labels)
}

/// DeLong structural components of one scoring: `v10[i]` for each positive,
/// `v01[j]` for each negative (in input order within each class).
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralComponents {
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

impl StructuralComponents {
    pub fn auc(&self) -> f64 {
        self.v10.iter().sum::<f64>() / self.v10.len() as f64
    }
}

/// Midrank computation of the structural components in O(n log n).
pub fn structural_components(scores: &[f64], labels: &[bool]) -> Result<StructuralComponents> {
    let (pos, neg) = split_classes(scores, labels)?;
    let (m, n) = (pos.len(), neg.len());
    let all: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let tz = stats::midranks(&all);
    let tx = stats::midranks(&pos);
    let ty = stats::midranks(&neg);
    Ok(StructuralComponents {
        v10: (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect(),
        v01: (0..n).map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64).collect(),
    })
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / k as f64;
    let mb = b.iter().sum::<f64>() / k as f64;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub p_value: f64,
}

/// Paired two-sided DeLong test of AUC(A) = AUC(B) on the same stays.
/// A zero variance of the difference yields p = 1.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::data("paired scorings differ in length"));
    }
    let a = structural_components(scores_a, labels)?;
    let b = structural_components(scores_b, labels)?;
    let (m, n) = (a.v10.len() as f64, a.v01.len() as f64);
    let var = |x: &StructuralComponents, y: &StructuralComponents| {
        covariance(&x.v10, &y.v10) / m + covariance(&x.v01, &y.v01) / n
    };
    let (var_a, var_b, cov) = (var(&a, &a), var(&b, &b), var(&a, &b));
    let (auc_a, auc_b) = (a.auc(), b.auc());
    let var_diff = var_a + var_b - 2.0 * cov;
    let p_value = if var_diff <= 0.0 {
        1.0
    } else {
        let z = (auc_a - auc_b) / var_diff.sqrt();
        erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
    };
    Ok(DelongResult {
        auc_a,
        auc_b,
        var_a,
        var_b,
        covariance: cov,
        p_value,
    })
}

/// Fraction of negatives alarming (score ≥ threshold).
pub fn false_positive_rate(negatives: &[f64], threshold: f64) -> f64 {
    negatives.iter().filter(|&&s| s >= threshold).count() as f64 / negatives.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedThreshold {
    pub threshold: f64,
    pub baseline_fpr: f64,
    pub model_fpr: f64,
}

/// Smallest model threshold whose stay-level FPR does not exceed the
/// baseline's FPR at `baseline_threshold`. Inputs are stay-level scores of
/// negative stays.
pub fn matched_threshold(baseline_negatives: &[f64], baseline_threshold: f64, model_negatives: &[f64]) -> Result<MatchedThreshold> {
    if baseline_negatives.is_empty() || model_negatives.is_empty() {
        return Err(Error::data("threshold matching needs negative stays"));
    }
    let baseline_fpr = false_positive_rate(baseline_negatives, baseline_threshold);
    let mut desc = model_negatives.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let n = desc.len();
    let allowed = ((baseline_fpr * n as f64) + 1e-9).floor() as usize;
    let threshold = if allowed >= n {
        desc[n - 1]
    } else {
        // strictly above the (allowed+1)-th largest negative score
        let floor = desc[allowed];
        match desc[..allowed].iter().rev().find(|&&s| s > floor) {
            Some(&s) => s,
            None => floor.next_up(),
        }
    };
    Ok(MatchedThreshold {
        threshold,
        baseline_fpr,
        model_fpr: false_positive_rate(model_negatives, threshold),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub stay_id: String,
    pub detected: bool,
    pub first_alarm_lead_hours: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub outcomes: Vec<DetectionOutcome>,
    pub median_lead_hours: Option<f64>,
    pub detection_rate: f64,
}

/// Hours from the first eligible bin scoring ≥ `threshold` to the event,
/// per positive stay; median over detected stays.
pub fn median_detection_time(positives: &[StayScore], threshold: f64) -> Result<DetectionSummary> {
    let mut outcomes = Vec::new();
    for s in positives.iter().filter(|s| s.positive) {
        let event = s
            .event_time
            .ok_or_else(|| Error::data(format!("positive stay `{}` has no event time", s.stay_id)))?;
        let first = s
            .bins
            .iter()
            .zip(&s.series)
            .find(|(&b, &v)| b * BIN_MINUTES < event && v >= threshold)
            .map(|(&b, _)| (event - b * BIN_MINUTES) as f64 / 60.0);
        outcomes.push(DetectionOutcome {
            stay_id: s.stay_id.clone(),
            detected: first.is_some(),
            first_alarm_lead_hours: first,
        });
    }
    let leads: Vec<f64> = outcomes.iter().filter_map(|o| o.first_alarm_lead_hours).collect();
    let detection_rate = if outcomes.is_empty() {
        0.0
    } else {
        leads.len() as f64 / outcomes.len() as f64
    };
    Ok(DetectionSummary {
        median_lead_hours: stats::median(&leads),
        detection_rate,
        outcomes,
    })
}

/// ROC points over every distinct stay-level threshold, from the strictest.
pub fn roc_curve(stays: &[StayScore]) -> Result<Vec<(f64, f64, f64)>> {
    let scores: Vec<f64> = stays.iter().map(|s| s.stay_level).collect();
    let labels: Vec<bool> = stays.iter().map(|s| s.positive).collect();
    let (pos, neg) = split_classes(&scores, &labels)?;
    let mut thresholds = scores.clone();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    for t in thresholds {
        out.push((t, false_positive_rate(&neg, t), false_positive_rate(&pos, t)));
    }
    Ok(out)
}

/// Per-bin, per-column contributions of one positive stay.
#[derive(Debug, Clone)]
pub struct TraceInput {
    pub event_time: u32,
    pub bins: Vec<u32>,
    pub contributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    pub lead_hours: Vec<f64>,
    pub columns: Vec<String>,
    /// `values[g][k]`: smoothed mean contribution of column `k` at grid point `g`;
    /// `None` where no stay has a bin there.
    pub values: Vec<Vec<Option<f64>>>,
}

/// Centered moving average over `half_width` points each side, skipping gaps.
pub fn moving_average(series: &[Option<f64>], half_width: usize) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|i| {
            if series[i].is_none() {
                return None;
            }
            let lo = i.saturating_sub(half_width);
            let hi = (i + half_width).min(series.len() - 1);
            let window: Vec<f64> = series[lo..=hi].iter().flatten().copied().collect();
            Some(window.iter().sum::<f64>() / window.len() as f64)
        })
        .collect()
}

/// Average contribution per column against hours before the event, on a
/// half-hour grid from 0 to `window_hours`, smoothed by a centered moving
/// average `smoothing_hours` wide.
pub fn contribution_traces(
    stays: &[TraceInput],
    columns: &[String],
    window_hours: u32,
    smoothing_hours: u32,
) -> Result<Traces> {
    if stays.is_empty() {
        return Err(Error::data("contribution traces need at least one positive stay"));
    }
    let per_hour = 60 / BIN_MINUTES;
    let n_grid = (window_hours * per_hour + 1) as usize;
    let k = columns.len();
    let mut sums = vec![vec![0.0; k]; n_grid];
    let mut counts = vec![0usize; n_grid];
    for s in stays {
        for (b, c) in s.bins.iter().zip(&s.contributions) {
            let start = b * BIN_MINUTES;
            if start >= s.event_time {
                continue;
            }
            let g = ((s.event_time - start) / BIN_MINUTES) as usize;
            if g < n_grid {
                counts[g] += 1;
                for (acc, v) in sums[g].iter_mut().zip(c) {
                    *acc += v;
                }
            }
        }
    }
    let half_width = (smoothing_hours * per_hour / 2) as usize;
    let mut values = vec![vec![None; k]; n_grid];
    for col in 0..k {
        let raw: Vec<Option<f64>> = (0..n_grid)
            .map(|g| (counts[g] > 0).then(|| sums[g][col] / counts[g] as f64))
            .collect();
        for (g, v) in moving_average(&raw, half_width).into_iter().enumerate() {
            values[g][col] = v;
        }
    }
    Ok(Traces {
        lead_hours: (0..n_grid).map(|g| g as f64 * BIN_MINUTES as f64 / 60.0).collect(),
        columns: columns.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub id: String,
    pub reduced_auc: f64,
    /// Full minus reduced mean CV AUC.
    pub drop: f64,
    /// `drop` divided by the largest drop.
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub lambda: f64,
    pub full_auc: f64,
    /// False when no feature removal lowered the AUC; `importance` then
    /// repeats the raw drops.
    pub normalized: bool,
    pub features: Vec<FeatureImportance>,
}

fn mean_cv_auc(stays: &[EncodedStay], folds: &[Vec<String>], lambda: f64, p: usize, opts: &FitOptions) -> Result<f64> {
    let fold_auc = lasso::cv_fold_aucs(stays, folds, &[lambda], p, opts)?;
    let (mean, _) = lasso::summarize_folds(&fold_auc, 1);
    if mean[0].is_nan() {
        return Err(Error::data("no cross-validation fold holds both classes"));
    }
    Ok(mean[0])
}

/// Drop-one importance: mean CV AUC at `lambda` with all columns, minus the
/// same with one feature's columns removed, scaled by the largest drop.
pub fn feature_importance(
    stays: &[EncodedStay],
    folds: &[Vec<String>],
    lambda: f64,
    feature_columns: &[(String, Range<usize>)],
    opts: &FitOptions,
) -> Result<ImportanceReport> {
    let p: usize = feature_columns.iter().map(|(_, r)| r.len()).sum();
    if feature_columns.len() < 2 {
        return Err(Error::data("feature importance needs at least two features"));
    }
    let full_auc = mean_cv_auc(stays, folds, lambda, p, opts)?;
    let reduced = crate::par::par_map(feature_columns, |(_, cols)| {
        let reduced: Vec<EncodedStay> = stays.iter().map(|s| s.without_columns(cols)).collect();
        mean_cv_auc(&reduced, folds, lambda, p - cols.len(), opts)
    });
    let mut features = Vec::with_capacity(feature_columns.len());
    for ((id, _), r) in feature_columns.iter().zip(reduced) {
        let reduced_auc = r?;
        features.push(FeatureImportance {
            id: id.clone(),
            reduced_auc,
            drop: full_auc - reduced_auc,
            importance: 0.0,
        });
    }
    let max_drop = features.iter().map(|f| f.drop).fold(f64::NEG_INFINITY, f64::max);
    let normalized = max_drop > 0.0;
    if !normalized {
        log::warn!("no feature removal lowers the CV AUC; reporting raw drops");
    }
    for f in &mut features {
        f.importance = if normalized { f.drop / max_drop } else { f.drop };
    }
    Ok(ImportanceReport {
        lambda,
        full_auc,
        normalized,
        features,
    })
}
