//! Table-driven rule scorers (MEWS, qSOFA and friends).
//!
//! A table assigns integer points to half-open value ranges per feature; the
//! row score is the sum. Defaults ship as JSON under `data/` and can be
//! replaced by any table in the same format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{BinnedStay, FeatureCatalog};
use crate::error::{Error, Result};
use crate::eval::StayScore;

const DEFAULT_MEWS: &str = include_str!("../data/mews.json");
const DEFAULT_QSOFA: &str = include_str!("../data/qsofa.json");
const DEFAULT_CATALOG: &str = include_str!("../data/catalog.json");

/// `[lo, hi)`; `None` is an infinite bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRange {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub points: u32,
}

impl PointRange {
    fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v < hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFeature {
    pub id: String,
    pub ranges: Vec<PointRange>,
}

impl TableFeature {
    pub fn points(&self, v: f64) -> u32 {
        self.ranges.iter().find(|r| r.contains(v)).map_or(0, |r| r.points)
    }

    pub fn max_points(&self) -> u32 {
        self.ranges.iter().map(|r| r.points).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct ScoringTable {
    pub name: String,
    pub threshold: u32,
    pub features: Vec<TableFeature>,
}

#[derive(Deserialize)]
struct RawTable {
    name: String,
    threshold: u32,
    features: Vec<TableFeature>,
}

impl TryFrom<RawTable> for ScoringTable {
    type Error = Error;

    fn try_from(r: RawTable) -> Result<Self> {
        let t = ScoringTable {
            name: r.name,
            threshold: r.threshold,
            features: r.features,
        };
        t.validate()?;
        Ok(t)
    }
}

impl ScoringTable {
    pub fn mews() -> Self {
        Self::from_json_str(DEFAULT_MEWS).expect("shipped MEWS table is valid")
    }

    pub fn qsofa() -> Self {
        Self::from_json_str(DEFAULT_QSOFA).expect("shipped qSOFA table is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)?;
        Self::from_json_str(&s).map_err(|e| Error::config(format!("scoring table {}: {e}", path.display())))
    }

    /// Each feature's ranges must tile the real line in increasing order.
    pub fn validate(&self) -> Result<()> {
        let bad = |id: &str, msg: &str| Err(Error::config(format!("table `{}`, feature `{id}`: {msg}", self.name)));
        if self.features.is_empty() {
            return Err(Error::config(format!("table `{}` has no features", self.name)));
        }
        for (i, f) in self.features.iter().enumerate() {
            if self.features[..i].iter().any(|g| g.id == f.id) {
                return bad(&f.id, "listed twice");
            }
            let (Some(first), Some(last)) = (f.ranges.first(), f.ranges.last()) else {
                return bad(&f.id, "no ranges");
            };
            if first.lo.is_some() || last.hi.is_some() {
                return bad(&f.id, "ranges must extend to ±infinity");
            }
            for r in &f.ranges {
                if r.lo.is_some_and(|v| !v.is_finite()) || r.hi.is_some_and(|v| !v.is_finite()) {
                    return bad(&f.id, "bounds must be finite or null");
                }
                if let (Some(lo), Some(hi)) = (r.lo, r.hi) {
                    if lo >= hi {
                        return bad(&f.id, "empty range");
                    }
                }
            }
            for w in f.ranges.windows(2) {
                match (w[0].hi, w[1].lo) {
                    (Some(a), Some(b)) if a == b => {}
                    _ => return bad(&f.id, "ranges must be contiguous and non-overlapping"),
                }
            }
        }
        Ok(())
    }

    pub fn max_score(&self) -> u32 {
        self.features.iter().map(TableFeature::max_points).sum()
    }

    pub fn feature_ids(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.id.as_str())
    }

    /// Resolve table features against a catalog's column order.
    pub fn bind<'a>(&'a self, catalog: &FeatureCatalog) -> Result<BoundTable<'a>> {
        let columns = self
            .features
            .iter()
            .map(|f| {
                catalog.index_of(&f.id).ok_or_else(|| {
                    Error::data(format!("table `{}` needs feature `{}`, absent from the catalog", self.name, f.id))
                })
            })
            .collect::<Result<_>>()?;
        Ok(BoundTable { table: self, columns })
    }
}

pub fn default_catalog() -> FeatureCatalog {
    FeatureCatalog::from_json_str(DEFAULT_CATALOG).expect("shipped catalog is valid")
}

#[derive(Debug, Clone)]
pub struct BoundTable<'a> {
    table: &'a ScoringTable,
    columns: Vec<usize>,
}

impl BoundTable<'_> {
    pub fn table(&self) -> &ScoringTable {
        self.table
    }

    /// Sum of points for one row in catalog column order.
    pub fn score_row(&self, row: &[f64]) -> Result<u32> {
        let mut total = 0;
        for (f, &c) in self.table.features.iter().zip(&self.columns) {
            match row.get(c) {
                Some(v) if v.is_finite() => total += f.points(*v),
                _ => return Err(Error::data(format!("missing value for `{}`", f.id))),
            }
        }
        Ok(total)
    }

    /// Per-bin scores over every bin of an imputed stay.
    pub fn score_stay(&self, stay: &BinnedStay) -> Result<Vec<u32>> {
        stay.x.iter().map(|r| self.score_row(r)).collect()
    }

    /// Series over eligible bins, ready for stay-level evaluation.
    pub fn stay_score(&self, stay: &BinnedStay) -> Result<StayScore> {
        let series = self.score_stay(stay)?;
        let rows: Vec<usize> = stay.eligible_rows().collect();
        Ok(StayScore::new(
            stay.stay_id(),
            stay.label.positive,
            stay.label.event_time,
            rows.iter().map(|&j| stay.bins[j]).collect(),
            rows.iter().map(|&j| series[j] as f64).collect(),
        ))
    }
}

/// Drop catalog features that need human input when `exclude_manual` is set.
pub fn restrict_catalog(catalog: &FeatureCatalog, exclude_manual: bool) -> Result<FeatureCatalog> {
    if !exclude_manual {
        return Ok(catalog.clone());
    }
    let keep: Vec<&str> = catalog.features().iter().filter(|f| !f.manual).map(|f| f.id.as_str()).collect();
    if keep.is_empty() {
        return Err(Error::config("excluding manual features leaves no features"));
    }
    catalog.subset(&keep)
}

/// Drop table features flagged manual in the catalog; the variant is named
/// with a trailing `*`.
pub fn restrict_table(table: &ScoringTable, catalog: &FeatureCatalog, exclude_manual: bool) -> Result<ScoringTable> {
    if !exclude_manual {
        return Ok(table.clone());
    }
    let is_manual = |id: &str| catalog.index_of(id).is_some_and(|i| catalog.get(i).manual);
    let features: Vec<TableFeature> = table.features.iter().filter(|f| !is_manual(&f.id)).cloned().collect();
    if features.is_empty() {
        return Err(Error::config(format!("table `{}` has no features left without manual inputs", table.name)));
    }
    Ok(ScoringTable {
        name: format!("{}*", table.name),
        threshold: table.threshold,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{FeatureSpec, StayLabel};
    use proptest::prelude::*;

    /// Catalog with columns in exactly the given order.
    fn catalog_for(ids: &[&str]) -> FeatureCatalog {
        FeatureCatalog::new(ids.iter().map(|id| FeatureSpec::new(id, id, "")).collect()).unwrap()
    }

    #[test]
    fn zero_point_row_scores_zero() {
        let cat = default_catalog();
        let t = ScoringTable::mews();
        let b = t.bind(&cat).unwrap();
        // HR SBP DBP RR TEMP SPO2 GCS AVPU
        let row = [75.0, 120.0, 70.0, 12.0, 37.0, 97.0, 15.0, 0.0];
        assert_eq!(b.score_row(&row).unwrap(), 0);
        assert_eq!(ScoringTable::qsofa().bind(&cat).unwrap().score_row(&row).unwrap(), 0);
    }

    #[test]
    fn qsofa_example() {
        let cat = catalog_for(&["RR", "SBP", "GCS"]);
        let t = ScoringTable::qsofa();
        let b = t.bind(&cat).unwrap();
        // RR 24 and SBP 95 each add one point, GCS 15 adds none
        assert_eq!(b.score_row(&[24.0, 95.0, 15.0]).unwrap(), 2);
        assert_eq!(b.score_row(&[22.0, 100.0, 14.0]).unwrap(), 3);
        assert_eq!(b.score_row(&[21.9, 101.0, 15.0]).unwrap(), 0);
    }

    #[test]
    fn maxima() {
        assert_eq!(ScoringTable::mews().max_score(), 14);
        assert_eq!(ScoringTable::qsofa().max_score(), 3);
        assert_eq!(ScoringTable::mews().threshold, 5);
        assert_eq!(ScoringTable::qsofa().threshold, 2);
    }

    #[test]
    fn missing_values_are_errors() {
        let cat = catalog_for(&["RR", "SBP", "GCS"]);
        let t = ScoringTable::qsofa();
        let b = t.bind(&cat).unwrap();
        assert!(b.score_row(&[24.0, f64::NAN, 15.0]).is_err());
        assert!(b.score_row(&[24.0]).is_err());
        assert!(t.bind(&catalog_for(&["RR", "SBP"])).is_err());
    }

    #[test]
    fn malformed_tables_rejected() {
        let gap = r#"{"name":"x","threshold":1,"features":[{"id":"HR","ranges":[
            {"lo":null,"hi":50,"points":1},{"lo":60,"hi":null,"points":0}]}]}"#;
        assert!(ScoringTable::from_json_str(gap).is_err());
        let bounded = r#"{"name":"x","threshold":1,"features":[{"id":"HR","ranges":[
            {"lo":0,"hi":null,"points":1}]}]}"#;
        assert!(ScoringTable::from_json_str(bounded).is_err());
        let negative = r#"{"name":"x","threshold":1,"features":[{"id":"HR","ranges":[
            {"lo":null,"hi":null,"points":-1}]}]}"#;
        assert!(ScoringTable::from_json_str(negative).is_err());
        let ok = r#"{"name":"x","threshold":1,"features":[{"id":"HR","ranges":[
            {"lo":null,"hi":null,"points":1}]}]}"#;
        assert!(ScoringTable::from_json_str(ok).is_ok());
    }

    #[test]
    fn restriction() {
        let cat = default_catalog();
        let q = restrict_table(&ScoringTable::qsofa(), &cat, true).unwrap();
        let ids: Vec<&str> = q.feature_ids().collect();
        assert_eq!(ids, ["RR", "SBP"]);
        assert_eq!(q.name, "qSOFA*");
        assert_eq!(restrict_table(&ScoringTable::mews(), &cat, true).unwrap().features.len(), 4);
        assert_eq!(restrict_table(&ScoringTable::qsofa(), &cat, false).unwrap(), ScoringTable::qsofa());
        let rc = restrict_catalog(&cat, true).unwrap();
        assert!(rc.index_of("GCS").is_none() && rc.index_of("AVPU").is_none());
        assert_eq!(rc.len(), 6);

        let manual_only = FeatureCatalog::from_json_str(r#"[{"id":"GCS","name":"g","unit":"","manual":true}]"#).unwrap();
        assert!(restrict_catalog(&manual_only, true).is_err());
        let gcs_table = r#"{"name":"g","threshold":1,"features":[{"id":"GCS","ranges":[{"lo":null,"hi":null,"points":0}]}]}"#;
        assert!(restrict_table(&ScoringTable::from_json_str(gcs_table).unwrap(), &manual_only, true).is_err());
    }

    fn stay(rows: Vec<Vec<f64>>, event: Option<u32>) -> BinnedStay {
        let n = rows.len() as u32;
        let label = match event {
            Some(t) => StayLabel::positive("s", t, n * 30),
            None => StayLabel::negative("s", n * 30),
        };
        BinnedStay {
            label,
            bins: (0..n).collect(),
            observed: rows.iter().map(|r| vec![true; r.len()]).collect(),
            weights: vec![1.0 / n as f64; n as usize],
            x: rows,
        }
    }

    #[test]
    fn stay_series() {
        let cat = catalog_for(&["RR", "SBP", "GCS"]);
        let t = ScoringTable::qsofa();
        let b = t.bind(&cat).unwrap();
        let flat = stay(vec![vec![16.0, 120.0, 15.0]; 5], None);
        let s = b.score_stay(&flat).unwrap();
        assert_eq!(s, vec![0; 5]);

        let mut rows = vec![vec![16.0, 120.0, 15.0]; 5];
        rows[2] = vec![25.0, 90.0, 15.0];
        let spike = stay(rows, Some(140));
        let s = b.score_stay(&spike).unwrap();
        assert_eq!(s.len(), 5);
        let alarms: Vec<bool> = s.iter().map(|&v| v >= t.threshold).collect();
        assert_eq!(alarms, [false, false, true, false, false]);

        // eligible bins stop before the event (bin 4 starts at minute 120 < 140, so all 5 qualify)
        let ss = b.stay_score(&spike).unwrap();
        assert_eq!(ss.stay_level, 2.0);
    }

    /// Values just either side of every boundary, plus far tails.
    fn probe_values(f: &TableFeature) -> Vec<f64> {
        let mut v = vec![-1e9, 1e9];
        for r in &f.ranges {
            if let Some(lo) = r.lo {
                v.extend([lo - 1e-6, lo, lo + 1e-6]);
            }
        }
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn default_tables_are_monotone_in_deviation() {
        for t in [ScoringTable::mews(), ScoringTable::qsofa()] {
            for f in &t.features {
                // the zero-point range anchors "normal"; points must not fall moving away from it
                let z = f.ranges.iter().position(|r| r.points == 0).unwrap();
                let values = probe_values(f);
                let idx_of = |v: f64| f.ranges.iter().position(|r| r.contains(v)).unwrap();
                for w in values.windows(2) {
                    let (a, b) = (idx_of(w[0]), idx_of(w[1]));
                    if a >= z && b >= z {
                        assert!(f.points(w[1]) >= f.points(w[0]), "{} {}", t.name, f.id);
                    }
                    if a <= z && b <= z {
                        assert!(f.points(w[0]) >= f.points(w[1]), "{} {}", t.name, f.id);
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn mews_scores_are_bounded(row in proptest::collection::vec(-1e4f64..1e4, 8)) {
            let cat = default_catalog();
            let t = ScoringTable::mews();
            let s = t.bind(&cat).unwrap().score_row(&row).unwrap();
            prop_assert!(s <= 14);
        }

        #[test]
        fn qsofa_scores_are_bounded(row in proptest::collection::vec(-1e4f64..1e4, 8)) {
            let cat = default_catalog();
            let t = ScoringTable::qsofa();
            let s = t.bind(&cat).unwrap().score_row(&row).unwrap();
            prop_assert!(s <= 3);
        }
    }
}
