//! Model inputs from imputed rows: multi-hot range indicators, or
//! standardized raw values for the baseline logistic regression.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cohort::{BinnedStay, FeatureCatalog};
use crate::discretizer::{RangeEntry, RangeMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub x: Vec<f64>,
    pub weight: f64,
    pub positive: bool,
    pub stay_id: Arc<str>,
    pub bin: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardEntry {
    pub id: String,
    pub mean: f64,
    pub std: f64,
}

impl StandardEntry {
    pub fn encode(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn decode(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Standardization {
    pub entries: Vec<StandardEntry>,
}

/// Weighted mean and standard deviation of every feature over training rows.
/// Zero-variance features are dropped.
pub fn fit_standardization(train: &[BinnedStay], catalog: &FeatureCatalog) -> Standardization {
    let mut entries = Vec::new();
    for (k, f) in catalog.features().iter().enumerate() {
        let (mut sw, mut sx) = (0.0, 0.0);
        for s in train {
            for (row, w) in s.x.iter().zip(&s.weights) {
                sw += w;
                sx += w * row[k];
            }
        }
        if sw <= 0.0 {
            continue;
        }
        let mean = sx / sw;
        let var = train
            .iter()
            .flat_map(|s| s.x.iter().zip(&s.weights))
            .map(|(row, w)| w * (row[k] - mean).powi(2))
            .sum::<f64>()
            / sw;
        let std = var.sqrt();
        if std > 1e-12 * (1.0 + mean.abs()) {
            entries.push(StandardEntry {
                id: f.id.clone(),
                mean,
                std,
            });
        } else {
            log::warn!("feature `{}` has zero variance on the training split and is dropped", f.id);
        }
    }
    Standardization { entries }
}

#[derive(Debug, Clone)]
enum Plan {
    MultiHot(Vec<(usize, RangeEntry, usize)>),
    Raw(Vec<(usize, StandardEntry)>),
}

/// Column plan binding an encoding to the feature columns of a catalog.
#[derive(Debug, Clone)]
pub struct Encoder {
    plan: Plan,
    n_columns: usize,
    labels: Vec<String>,
}

impl Encoder {
    pub fn multi_hot(map: &RangeMap, catalog: &FeatureCatalog) -> Result<Self> {
        let mut plan = Vec::new();
        let mut offset = 0;
        let mut labels = Vec::new();
        for e in map.entries.iter().filter(|e| e.included) {
            let src = catalog
                .index_of(&e.id)
                .ok_or_else(|| Error::data(format!("range map feature `{}` is not in the catalog", e.id)))?;
            labels.extend(e.labels().into_iter().map(|l| format!("{} {l}", e.id)));
            plan.push((src, e.clone(), offset));
            offset += e.n_ranges();
        }
        Ok(Self {
            plan: Plan::MultiHot(plan),
            n_columns: offset,
            labels,
        })
    }

    pub fn raw(standardization: &Standardization, catalog: &FeatureCatalog) -> Result<Self> {
        let plan = standardization
            .entries
            .iter()
            .map(|e| {
                catalog
                    .index_of(&e.id)
                    .map(|src| (src, e.clone()))
                    .ok_or_else(|| Error::data(format!("standardization feature `{}` is not in the catalog", e.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_columns: plan.len(),
            labels: plan.iter().map(|(_, e)| e.id.clone()).collect(),
            plan: Plan::Raw(plan),
        })
    }

    pub fn n_columns(&self) -> usize {
        self.n_columns
    }

    pub fn column_labels(&self) -> &[String] {
        &self.labels
    }

    /// Column range owned by each source feature id.
    pub fn feature_columns(&self) -> Vec<(String, std::ops::Range<usize>)> {
        match &self.plan {
            Plan::MultiHot(p) => p.iter().map(|(_, e, o)| (e.id.clone(), *o..*o + e.n_ranges())).collect(),
            Plan::Raw(p) => p.iter().enumerate().map(|(i, (_, e))| (e.id.clone(), i..i + 1)).collect(),
        }
    }

    pub fn encode_row(&self, values: &[f64]) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.n_columns];
        match &self.plan {
            Plan::MultiHot(p) => {
                for (src, e, offset) in p {
                    let v = values[*src];
                    if v.is_nan() {
                        return Err(Error::Numerical(format!("NaN value for `{}` reached the encoder", e.id)));
                    }
                    x[offset + e.range_of(v)] = 1.0;
                }
            }
            Plan::Raw(p) => {
                for (j, (src, e)) in p.iter().enumerate() {
                    x[j] = e.encode(values[*src]);
                }
            }
        }
        Ok(x)
    }

    /// Encode the selected rows of a stay, carrying its weights.
    pub fn encode_rows(&self, stay: &BinnedStay, rows: impl IntoIterator<Item = usize>) -> Result<Vec<DesignRow>> {
        let id: Arc<str> = Arc::from(stay.stay_id());
        rows.into_iter()
            .map(|i| {
                Ok(DesignRow {
                    x: self.encode_row(&stay.x[i])?,
                    weight: stay.weights[i],
                    positive: stay.label.positive,
                    stay_id: id.clone(),
                    bin: stay.bins[i],
                })
            })
            .collect()
    }

    pub fn encode_stay(&self, stay: &BinnedStay) -> Result<Vec<DesignRow>> {
        self.encode_rows(stay, 0..stay.len())
    }
}

pub fn encode_multihot(stay: &BinnedStay, catalog: &FeatureCatalog, map: &RangeMap) -> Result<Vec<DesignRow>> {
    Encoder::multi_hot(map, catalog)?.encode_stay(stay)
}

pub fn encode_raw(stay: &BinnedStay, catalog: &FeatureCatalog, standardization: &Standardization) -> Result<Vec<DesignRow>> {
    Encoder::raw(standardization, catalog)?.encode_stay(stay)
}

/// A stay ready for fitting and scoring: weighted training rows (empty for
/// test stays) and its scoring-eligible rows.
#[derive(Debug, Clone)]
pub struct EncodedStay {
    pub stay_id: Arc<str>,
    pub positive: bool,
    pub event_time: Option<u32>,
    pub train: Vec<DesignRow>,
    pub eval: Vec<DesignRow>,
}

impl EncodedStay {
    pub fn new(encoder: &Encoder, full: &BinnedStay, train: Option<&BinnedStay>) -> Result<Self> {
        Ok(Self {
            stay_id: Arc::from(full.stay_id()),
            positive: full.label.positive,
            event_time: full.label.event_time,
            train: match train {
                Some(t) => encoder.encode_stay(t)?,
                None => Vec::new(),
            },
            eval: encoder.encode_rows(full, full.eligible_rows().collect::<Vec<_>>())?,
        })
    }

    /// Copy with the given columns removed.
    pub fn without_columns(&self, drop: &std::ops::Range<usize>) -> Self {
        let strip = |rows: &[DesignRow]| {
            rows.iter()
                .map(|r| DesignRow {
                    x: r.x
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| !drop.contains(j))
                        .map(|(_, v)| *v)
                        .collect(),
                    ..r.clone()
                })
                .collect()
        };
        Self {
            stay_id: self.stay_id.clone(),
            positive: self.positive,
            event_time: self.event_time,
            train: strip(&self.train),
            eval: strip(&self.eval),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{FeatureSpec, StayLabel};
    use proptest::prelude::*;

    fn catalog() -> FeatureCatalog {
        FeatureCatalog::new(vec![FeatureSpec::new("SBP", "", "mmHg"), FeatureSpec::new("HR", "", "bpm")]).unwrap()
    }

    fn stay(rows: Vec<Vec<f64>>) -> BinnedStay {
        let n = rows.len();
        BinnedStay {
            label: StayLabel::negative("s", 30 * n as u32),
            bins: (0..n as u32).collect(),
            observed: vec![vec![true; 2]; n],
            x: rows,
            weights: vec![1.0 / n as f64; n],
        }
    }

    fn sbp_map(included_hr: bool) -> RangeMap {
        RangeMap {
            entries: vec![
                RangeEntry {
                    id: "SBP".into(),
                    splits: vec![78.5, 89.5, 97.5, 108.5, 119.5, 154.5],
                    included: true,
                },
                RangeEntry {
                    id: "HR".into(),
                    splits: if included_hr { vec![100.0] } else { vec![] },
                    included: included_hr,
                },
            ],
        }
    }

    #[test]
    fn multihot_places_value_in_its_range() {
        let rows = encode_multihot(&stay(vec![vec![85.0, 60.0], vec![78.5, 100.0]]), &catalog(), &sbp_map(true)).unwrap();
        assert_eq!(rows[0].x.len(), 9);
        assert_eq!(rows[0].x[..7], [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(rows[0].x[7..], [1.0, 0.0]);
        // a value on a split point falls in the range starting there
        assert_eq!(rows[1].x[1], 1.0);
        assert_eq!(rows[1].x[8], 1.0);
    }

    #[test]
    fn excluded_features_contribute_no_columns() {
        let rows = encode_multihot(&stay(vec![vec![85.0, 60.0]]), &catalog(), &sbp_map(false)).unwrap();
        assert_eq!(rows[0].x.len(), 7);
    }

    #[test]
    fn raw_standardizes() {
        let s = Standardization {
            entries: vec![StandardEntry {
                id: "HR".into(),
                mean: 80.0,
                std: 10.0,
            }],
        };
        let rows = encode_raw(&stay(vec![vec![0.0, 80.0], vec![0.0, 90.0]]), &catalog(), &s).unwrap();
        assert_eq!(rows[0].x, vec![0.0]);
        assert_eq!(rows[1].x, vec![1.0]);
        let bad = Standardization {
            entries: vec![StandardEntry {
                id: "TEMP".into(),
                mean: 0.0,
                std: 1.0,
            }],
        };
        assert!(encode_raw(&stay(vec![vec![0.0, 80.0]]), &catalog(), &bad).is_err());
    }

    #[test]
    fn standardization_drops_constant_features() {
        let s = fit_standardization(&[stay(vec![vec![120.0, 70.0], vec![120.0, 90.0]])], &catalog());
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries[0].id, "HR");
        assert!((s.entries[0].mean - 80.0).abs() < 1e-12);
        assert!((s.entries[0].std - 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn raw_round_trip(v in -1e4f64..1e4, mean in -100.0f64..100.0, std in 0.1f64..50.0) {
            let e = StandardEntry { id: "x".into(), mean, std };
            prop_assert!((e.decode(e.encode(v)) - v).abs() < 1e-12 * (1.0 + v.abs()));
        }

        #[test]
        fn multihot_rows_sum_to_included_feature_count(
            sbp in -1e3f64..1e3, hr in -1e3f64..1e3,
            mut splits in prop::collection::btree_set(-500i32..500, 0..6),
        ) {
            let s: Vec<f64> = std::mem::take(&mut splits).into_iter().map(|v| v as f64).collect();
            let map = RangeMap { entries: vec![
                RangeEntry { id: "SBP".into(), included: true, splits: s.clone() },
                RangeEntry { id: "HR".into(), included: true, splits: vec![0.0] },
            ]};
            let enc = Encoder::multi_hot(&map, &catalog()).unwrap();
            prop_assert_eq!(enc.n_columns(), s.len() + 1 + 2);
            let x = enc.encode_row(&[sbp, hr]).unwrap();
            prop_assert_eq!(x.iter().sum::<f64>(), 2.0);
            prop_assert!(x.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
