//! Self-contained fitted model: everything inference needs, in one JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{bin_stay, impute, BinnedStay, FeatureCatalog, ImputationConstants, Stay};
use crate::discretizer::{range_labels, RangeMap};
use crate::encoder::{Encoder, Standardization};
use crate::error::{Error, Result};
use crate::eval::StayScore;
use crate::lasso::GlmFit;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Per-feature range indicators (the interpretable score).
    MultiHot,
    /// Standardized raw values (the plain logistic-regression baseline).
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub schema: u32,
    pub name: String,
    pub encoding: Encoding,
    pub catalog: FeatureCatalog,
    pub imputation: ImputationConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<RangeMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    pub intercept: f64,
    pub columns: Vec<String>,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub converged: bool,
    pub provenance: Provenance,
}

/// Scores for every bin of one stay.
#[derive(Debug, Clone, PartialEq)]
pub struct StaySeries {
    pub stay: BinnedStay,
    pub scores: Vec<f64>,
}

impl StaySeries {
    /// Restrict to scoring-eligible bins for stay-level evaluation.
    pub fn stay_score(&self) -> StayScore {
        let rows: Vec<usize> = self.stay.eligible_rows().collect();
        StayScore::new(
            self.stay.stay_id(),
            self.stay.label.positive,
            self.stay.label.event_time,
            rows.iter().map(|&j| self.stay.bins[j]).collect(),
            rows.iter().map(|&j| self.scores[j]).collect(),
        )
    }
}

impl ScoreModel {
    pub fn encoder(&self) -> Result<Encoder> {
        let enc = match (self.encoding, &self.ranges, &self.standardization) {
            (Encoding::MultiHot, Some(r), _) => Encoder::multi_hot(r, &self.catalog)?,
            (Encoding::Raw, _, Some(s)) => Encoder::raw(s, &self.catalog)?,
            _ => return Err(Error::data(format!("model `{}` lacks its encoding parameters", self.name))),
        };
        if enc.n_columns() != self.coefficients.len() {
            return Err(Error::data(format!(
                "model `{}` has {} coefficients for {} columns",
                self.name,
                self.coefficients.len(),
                enc.n_columns()
            )));
        }
        Ok(enc)
    }

    pub fn glm(&self) -> GlmFit {
        GlmFit {
            converged: self.converged,
            ..GlmFit::new(self.intercept, self.coefficients.clone(), self.lambda)
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "model schema {} is not supported (expected {SCHEMA_VERSION})",
                m.schema
            )));
        }
        if m.columns.len() != m.coefficients.len() {
            return Err(Error::data("model column labels and coefficients differ in length"));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Every model feature must be present in the data catalog.
    pub fn check_catalog(&self, data: &FeatureCatalog) -> Result<()> {
        match self.catalog.ids().find(|id| data.index_of(id).is_none()) {
            Some(id) => Err(Error::data(format!("model `{}` needs feature `{id}`, absent from the data", self.name))),
            None => Ok(()),
        }
    }

    /// Grid and impute a raw stay with the stored constants.
    pub fn prepare(&self, stay: &Stay, data: &FeatureCatalog) -> Result<BinnedStay> {
        impute(&bin_stay(&stay.project(data, &self.catalog), &self.catalog), &self.imputation)
    }

    pub fn score_binned(&self, encoder: &Encoder, stay: &BinnedStay) -> Result<Vec<f64>> {
        let glm = self.glm();
        stay.x.iter().map(|row| Ok(glm.score(&encoder.encode_row(row)?))).collect()
    }

    pub fn score_stays(&self, stays: &[Stay], data: &FeatureCatalog) -> Result<Vec<StaySeries>> {
        self.check_catalog(data)?;
        let enc = self.encoder()?;
        stays
            .iter()
            .map(|s| {
                let stay = self.prepare(s, data)?;
                let scores = self.score_binned(&enc, &stay)?;
                Ok(StaySeries { stay, scores })
            })
            .collect()
    }

    /// Per-column contribution `β_k · x_k` of one encoded row.
    pub fn contributions(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.coefficients).map(|(a, b)| a * b).collect()
    }

    /// One row per (feature, range) in catalog order; one row per feature
    /// for raw models. Features without columns are left out.
    pub fn coefficient_rows(&self) -> Result<Vec<CoefficientRow>> {
        let columns = self.encoder()?.feature_columns();
        let mut rows = Vec::new();
        for f in self.catalog.features() {
            let Some((_, cols)) = columns.iter().find(|(id, _)| *id == f.id) else {
                continue;
            };
            let beta = &self.coefficients[cols.clone()];
            match (self.encoding, &self.ranges) {
                (Encoding::MultiHot, Some(map)) => {
                    let splits = &map.entry(&f.id).expect("encoder column has a range entry").splits;
                    for (i, label) in range_labels(splits).into_iter().enumerate() {
                        rows.push(CoefficientRow {
                            feature: f.id.clone(),
                            range: label,
                            lower: i.checked_sub(1).map(|j| splits[j]),
                            upper: splits.get(i).copied(),
                            coefficient: beta[i],
                        });
                    }
                }
                _ => rows.push(CoefficientRow {
                    feature: f.id.clone(),
                    range: "per sd".into(),
                    lower: None,
                    upper: None,
                    coefficient: beta[0],
                }),
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub feature: String,
    /// `< a`, `[a, b)` or `>= b`; `per sd` for raw models.
    pub range: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub coefficient: f64,
}
