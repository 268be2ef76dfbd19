//! Univariate range extraction: CART-style binary splitting on weighted
//! information gain, grown best-leaf-first under a leaf budget.

use serde::{Deserialize, Serialize};

use crate::cohort::{BinnedStay, FeatureCatalog};
use crate::error::{Error, Result};

/// Gains closer than this are ties; the smaller split point wins.
const GAIN_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizerConfig {
    pub max_ranges: usize,
    /// Minimum weight on each side of a split, as a fraction of the feature's total weight.
    pub min_leaf_weight_fraction: f64,
    /// Minimum information gain (bits) of an admissible split.
    pub min_gain: f64,
}

impl Default for DiscretizerConfig {
    fn default() -> Self {
        Self {
            max_ranges: 8,
            min_leaf_weight_fraction: 0.05,
            min_gain: 1e-4,
        }
    }
}

impl DiscretizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ranges < 1 {
            return Err(Error::config("max_ranges must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.min_leaf_weight_fraction) {
            return Err(Error::config("min_leaf_weight_fraction must lie in [0, 0.5)"));
        }
        if !(self.min_gain >= 0.0) {
            return Err(Error::config("min_gain must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitItem {
    pub value: f64,
    pub weight: f64,
    pub positive: bool,
}

impl SplitItem {
    pub fn new(value: f64, weight: f64, positive: bool) -> Self {
        Self {
            value,
            weight,
            positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub point: f64,
    pub gain: f64,
}

/// Midpoints between consecutive distinct values.
pub fn candidate_splits(items: &[SplitItem]) -> Vec<f64> {
    let mut values: Vec<f64> = items.iter().map(|i| i.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    values.windows(2).map(|w| midpoint(w[0], w[1])).collect()
}

fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}

/// Binary entropy in bits of a two-class weight split; 0·log 0 = 0.
fn entropy(w_pos: f64, w_neg: f64) -> f64 {
    let total = w_pos + w_neg;
    if total <= 0.0 {
        return 0.0;
    }
    [w_pos, w_neg]
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| {
            let q = w / total;
            -q * q.log2()
        })
        .sum()
}

pub fn weighted_entropy(items: &[SplitItem]) -> Result<f64> {
    let (pos, neg) = class_weights(items);
    if pos + neg <= 0.0 {
        return Err(Error::data("entropy of zero total weight"));
    }
    Ok(entropy(pos, neg))
}

fn class_weights(items: &[SplitItem]) -> (f64, f64) {
    items.iter().fold((0.0, 0.0), |(p, n), i| {
        if i.positive {
            (p + i.weight, n)
        } else {
            (p, n + i.weight)
        }
    })
}

/// Best split of items already sorted by value. Also returns the number of
/// items going left.
fn best_split_sorted(sorted: &[SplitItem], min_leaf_weight: f64, min_gain: f64) -> Option<(Split, usize)> {
    let (tot_pos, tot_neg) = class_weights(sorted);
    let total = tot_pos + tot_neg;
    if total <= 0.0 {
        return None;
    }
    let parent = entropy(tot_pos, tot_neg);
    let (mut lp, mut ln) = (0.0, 0.0);
    let mut best: Option<(Split, usize)> = None;
    for i in 0..sorted.len() - 1 {
        if sorted[i].positive {
            lp += sorted[i].weight;
        } else {
            ln += sorted[i].weight;
        }
        if sorted[i].value == sorted[i + 1].value {
            continue;
        }
        let (rp, rn) = ((tot_pos - lp).max(0.0), (tot_neg - ln).max(0.0));
        let (wl, wr) = (lp + ln, rp + rn);
        if wl < min_leaf_weight || wr < min_leaf_weight {
            continue;
        }
        let gain = parent - (wl / total * entropy(lp, ln) + wr / total * entropy(rp, rn));
        if best.is_none_or(|(b, _)| gain > b.gain + GAIN_TIE) {
            let point = midpoint(sorted[i].value, sorted[i + 1].value);
            best = Some((Split { point, gain }, i + 1));
        }
    }
    best.filter(|(s, _)| s.gain > min_gain)
}

/// Split maximizing information gain; `None` when no split with both sides
/// holding at least `min_leaf_weight` gains more than `min_gain`.
pub fn best_split(items: &[SplitItem], min_leaf_weight: f64, min_gain: f64) -> Option<Split> {
    if items.len() < 2 {
        return None;
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    best_split_sorted(&sorted, min_leaf_weight, min_gain).map(|(s, _)| s)
}

/// Grow ranges best-leaf-first: the leaf whose best split removes the most
/// total weighted entropy is split next, until `max_ranges` leaves exist or
/// no leaf has an admissible split. Returns sorted split points.
pub fn fit_ranges(items: &[SplitItem], config: &DiscretizerConfig) -> Vec<f64> {
    if items.len() < 2 || config.max_ranges < 2 {
        return Vec::new();
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    let total: f64 = sorted.iter().map(|i| i.weight).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let min_leaf = config.min_leaf_weight_fraction * total;

    struct Leaf {
        start: usize,
        end: usize,
        best: Option<(Split, usize)>,
        priority: f64,
    }
    let make_leaf = |start: usize, end: usize| {
        let slice = &sorted[start..end];
        let best = if slice.len() >= 2 {
            best_split_sorted(slice, min_leaf, config.min_gain)
        } else {
            None
        };
        let weight: f64 = slice.iter().map(|i| i.weight).sum();
        let priority = best.map_or(f64::NEG_INFINITY, |(s, _)| s.gain * weight / total);
        Leaf {
            start,
            end,
            best,
            priority,
        }
    };

    let mut leaves = vec![make_leaf(0, sorted.len())];
    let mut splits = Vec::new();
    while leaves.len() < config.max_ranges {
        // highest priority; ties go to the leaf holding smaller values
        let mut pick: Option<usize> = None;
        for (i, l) in leaves.iter().enumerate() {
            if l.best.is_none() {
                continue;
            }
            let better = match pick {
                None => true,
                Some(j) => {
                    let b = &leaves[j];
                    l.priority > b.priority + GAIN_TIE
                        || (l.priority > b.priority - GAIN_TIE && sorted[l.start].value < sorted[b.start].value)
                }
            };
            if better {
                pick = Some(i);
            }
        }
        let Some(idx) = pick else { break };
        let leaf = leaves.swap_remove(idx);
        let (split, left_len) = leaf.best.expect("picked leaf has a split");
        splits.push(split.point);
        let mid = leaf.start + left_len;
        leaves.push(make_leaf(leaf.start, mid));
        leaves.push(make_leaf(mid, leaf.end));
    }
    splits.sort_by(f64::total_cmp);
    splits
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub id: String,
    pub splits: Vec<f64>,
    pub included: bool,
}

impl RangeEntry {
    pub fn n_ranges(&self) -> usize {
        self.splits.len() + 1
    }

    /// Index of the half-open range `[s_i, s_{i+1})` holding `value`.
    pub fn range_of(&self, value: f64) -> usize {
        self.splits.partition_point(|&s| s <= value)
    }

    /// Human-readable label per range, lower-inclusive.
    pub fn labels(&self) -> Vec<String> {
        range_labels(&self.splits)
    }
}

/// A split point for display: midpoints such as 62.995000000000005 print as
/// 62.995. The stored value is unchanged.
pub fn format_bound(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn range_labels(splits: &[f64]) -> Vec<String> {
    if splits.is_empty() {
        return vec!["all".to_string()];
    }
    let b: Vec<String> = splits.iter().map(|&v| format_bound(v)).collect();
    let mut out = Vec::with_capacity(b.len() + 1);
    out.push(format!("< {}", b[0]));
    for w in b.windows(2) {
        out.push(format!("[{}, {})", w[0], w[1]));
    }
    out.push(format!(">= {}", b[b.len() - 1]));
    out
}

/// Per-feature split points, in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RangeMap {
    pub entries: Vec<RangeEntry>,
}

impl RangeMap {
    pub fn entry(&self, id: &str) -> Option<&RangeEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn n_columns(&self) -> usize {
        self.entries.iter().filter(|e| e.included).map(RangeEntry::n_ranges).sum()
    }

    pub fn validate(&self, max_ranges: Option<usize>) -> Result<()> {
        for e in &self.entries {
            if e.splits.iter().any(|s| !s.is_finite()) || e.splits.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::data(format!("split points of `{}` are not strictly increasing", e.id)));
            }
            if let Some(m) = max_ranges {
                if e.n_ranges() > m {
                    return Err(Error::data(format!("`{}` has more than {m} ranges", e.id)));
                }
            }
        }
        Ok(())
    }
}

/// Observed (not imputed) values of feature `k` over training stays. Each
/// stay's training weights are renormalized over its observed rows, so every
/// stay that saw the feature contributes total weight one.
pub fn feature_items<'a>(train: impl IntoIterator<Item = &'a BinnedStay>, k: usize) -> Vec<SplitItem> {
    let mut items = Vec::new();
    for stay in train {
        let rows: Vec<usize> = (0..stay.len()).filter(|&i| stay.observed[i][k]).collect();
        let total: f64 = rows.iter().map(|&i| stay.weights[i]).sum();
        if total <= 0.0 {
            continue;
        }
        items.extend(
            rows.iter()
                .map(|&i| SplitItem::new(stay.x[i][k], stay.weights[i] / total, stay.label.positive)),
        );
    }
    items
}

/// Fit ranges for every catalog feature from train-mode weighted stays.
pub fn fit_range_map(train: &[BinnedStay], catalog: &FeatureCatalog, config: &DiscretizerConfig) -> RangeMap {
    RangeMap {
        entries: catalog
            .features()
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let items = feature_items(train, k);
                let splits = fit_ranges(&items, config);
                if splits.is_empty() {
                    log::warn!("feature `{}` produced no ranges and is excluded", f.id);
                }
                RangeEntry {
                    id: f.id.clone(),
                    included: !splits.is_empty(),
                    splits,
                }
            })
            .collect(),
    }
}
