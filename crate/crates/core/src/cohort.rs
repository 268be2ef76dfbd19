//! Stays, CSV ingestion, half-hour gridding, imputation, training weights and
//! stay-level splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::stats;

/// Width of one time bin.
pub const BIN_MINUTES: u32 = 30;
/// Length of the positive-stay label ramp.
pub const RAMP_MINUTES: u32 = 72 * 60;
pub const RAMP_BINS: u32 = RAMP_MINUTES / BIN_MINUTES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    pub name: String,
    pub unit: String,
    /// Recorded by staff rather than a device (GCS, AVPU).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub manual: bool,
}

impl FeatureSpec {
    pub fn new(id: &str, name: &str, unit: &str) -> Self {
        Self {
            id: id.to_string(),
            name: name.to_string(),
            unit: unit.to_string(),
            manual: false,
        }
    }

    pub fn manual(mut self) -> Self {
        self.manual = true;
        self
    }
}

/// Ordered feature list. Its order is the column order everywhere downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureSpec>", into = "Vec<FeatureSpec>")]
pub struct FeatureCatalog {
    features: Vec<FeatureSpec>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<FeatureSpec>> for FeatureCatalog {
    type Error = Error;

    fn try_from(features: Vec<FeatureSpec>) -> Result<Self> {
        Self::new(features)
    }
}

impl From<FeatureCatalog> for Vec<FeatureSpec> {
    fn from(c: FeatureCatalog) -> Self {
        c.features
    }
}

impl FeatureCatalog {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if f.id.trim().is_empty() {
                return Err(Error::config(format!("catalog entry {i} has an empty id")));
            }
            if index.insert(f.id.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate feature id `{}` in catalog", f.id)));
            }
        }
        Ok(Self { features, index })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let features: Vec<FeatureSpec> = serde_json::from_str(s)?;
        Self::new(features)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.features).expect("catalog serializes")
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn get(&self, i: usize) -> &FeatureSpec {
        &self.features[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.id.as_str())
    }

    /// Sub-catalog holding `ids`, in this catalog's order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        for id in &wanted {
            if !self.index.contains_key(*id) {
                return Err(Error::config(format!("unknown feature `{id}`")));
            }
        }
        Self::new(
            self.features
                .iter()
                .filter(|f| wanted.contains(f.id.as_str()))
                .cloned()
                .collect(),
        )
    }
}

/// One observation; `feature` indexes the catalog the stay was ingested with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRecord {
    pub timestamp: u32,
    pub feature: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayLabel {
    pub stay_id: String,
    pub positive: bool,
    pub event_time: Option<u32>,
    pub end_time: u32,
}

impl StayLabel {
    pub fn negative(stay_id: &str, end_time: u32) -> Self {
        Self {
            stay_id: stay_id.to_string(),
            positive: false,
            event_time: None,
            end_time,
        }
    }

    pub fn positive(stay_id: &str, event_time: u32, end_time: u32) -> Self {
        Self {
            stay_id: stay_id.to_string(),
            positive: true,
            event_time: Some(event_time),
            end_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.positive, self.event_time) {
            (true, None) => Err(Error::data(format!(
                "stay `{}`: event time required for positive stay",
                self.stay_id
            ))),
            (false, Some(_)) => Err(Error::data(format!(
                "stay `{}`: event time given for negative stay",
                self.stay_id
            ))),
            (true, Some(0)) => Err(Error::data(format!(
                "stay `{}`: event time must be after stay start",
                self.stay_id
            ))),
            (true, Some(t)) if t > self.end_time => Err(Error::data(format!(
                "stay `{}`: event time {t} exceeds end time {}",
                self.stay_id, self.end_time
            ))),
            _ => Ok(()),
        }
    }

    pub fn y(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            0.0
        }
    }

    /// Whether the bin may be used for scoring: positives only before the event.
    pub fn is_eligible_bin(&self, bin: u32) -> bool {
        match self.event_time {
            Some(t) => bin * BIN_MINUTES < t,
            None => true,
        }
    }

    pub fn last_bin(&self) -> u32 {
        self.end_time / BIN_MINUTES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stay {
    pub label: StayLabel,
    /// Sorted by timestamp; ties keep file order.
    pub records: Vec<RawRecord>,
}

impl Stay {
    pub fn id(&self) -> &str {
        &self.label.stay_id
    }

    /// Re-index the records onto `to`, dropping features it does not contain.
    pub fn project(&self, from: &FeatureCatalog, to: &FeatureCatalog) -> Stay {
        let map: Vec<Option<usize>> = from.features().iter().map(|f| to.index_of(&f.id)).collect();
        Stay {
            label: self.label.clone(),
            records: self
                .records
                .iter()
                .filter_map(|r| map[r.feature].map(|feature| RawRecord { feature, ..*r }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub stays: Vec<Stay>,
    pub warnings: Vec<String>,
}

pub fn ingest_csv(
    records_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    catalog: &FeatureCatalog,
) -> Result<Ingested> {
    let records_path = records_path.as_ref();
    let labels_path = labels_path.as_ref();
    ingest_readers(
        std::fs::File::open(records_path)?,
        &records_path.display().to_string(),
        std::fs::File::open(labels_path)?,
        &labels_path.display().to_string(),
        catalog,
    )
}

fn parse_err(file: &str, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line: record.position().map(|p| p.line()).unwrap_or(0),
        message: message.into(),
    }
}

fn check_header(file: &str, rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_minutes(file: &str, row: &csv::StringRecord, field: &str, what: &str) -> Result<u32> {
    field
        .trim()
        .parse::<u32>()
        .map_err(|_| parse_err(file, row, format!("{what} `{field}` is not a non-negative integer")))
}

pub fn ingest_readers(
    records: impl Read,
    records_name: &str,
    labels: impl Read,
    labels_name: &str,
    catalog: &FeatureCatalog,
) -> Result<Ingested> {
    let mut warnings = Vec::new();

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(labels);
    check_header(labels_name, &mut rdr, &["stay_id", "label", "event_time_min", "end_time_min"])?;
    let mut stay_index: HashMap<String, usize> = HashMap::new();
    let mut stays: Vec<Stay> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(parse_err(labels_name, &row, format!("expected 4 fields, found {}", row.len())));
        }
        let stay_id = row[0].trim().to_string();
        if stay_id.is_empty() {
            return Err(parse_err(labels_name, &row, "empty stay_id"));
        }
        let positive = match row[1].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(labels_name, &row, format!("label `{other}` is not 0 or 1"))),
        };
        let event_time = match row[2].trim() {
            "" => None,
            s => Some(parse_minutes(labels_name, &row, s, "event_time_min")?),
        };
        let end_time = parse_minutes(labels_name, &row, &row[3], "end_time_min")?;
        let label = StayLabel {
            stay_id: stay_id.clone(),
            positive,
            event_time,
            end_time,
        };
        label.validate().map_err(|e| match e {
            Error::Data(msg) => parse_err(labels_name, &row, msg),
            other => other,
        })?;
        if stay_index.insert(stay_id.clone(), stays.len()).is_some() {
            return Err(parse_err(labels_name, &row, format!("duplicate label for stay `{stay_id}`")));
        }
        stays.push(Stay {
            label,
            records: Vec::new(),
        });
    }

    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(records);
    check_header(records_name, &mut rdr, &["stay_id", "timestamp_min", "feature_id", "value"])?;
    // (timestamp, feature, value, file order)
    let mut per_stay: Vec<Vec<(u32, usize, f64, usize)>> = vec![Vec::new(); stays.len()];
    for (order, row) in rdr.records().enumerate() {
        let row = row?;
        if row.len() != 4 {
            return Err(parse_err(records_name, &row, format!("expected 4 fields, found {}", row.len())));
        }
        let stay_id = row[0].trim();
        let Some(&s) = stay_index.get(stay_id) else {
            return Err(parse_err(records_name, &row, format!("stay `{stay_id}` has no label")));
        };
        let timestamp = parse_minutes(records_name, &row, &row[1], "timestamp_min")?;
        let feature_id = row[2].trim();
        let Some(feature) = catalog.index_of(feature_id) else {
            return Err(parse_err(records_name, &row, format!("unknown feature `{feature_id}`")));
        };
        let value: f64 = row[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(records_name, &row, format!("value `{}` is not a number", &row[3])))?;
        if !value.is_finite() {
            return Err(parse_err(records_name, &row, format!("non-finite value `{}`", &row[3])));
        }
        per_stay[s].push((timestamp, feature, value, order));
    }

    for (stay, mut recs) in stays.iter_mut().zip(per_stay) {
        recs.sort_by_key(|&(t, f, _, order)| (t, f, order));
        let before = recs.len();
        // keep the last occurrence of each (timestamp, feature)
        let mut deduped: Vec<(u32, usize, f64, usize)> = Vec::with_capacity(recs.len());
        for r in recs {
            match deduped.last_mut() {
                Some(last) if last.0 == r.0 && last.1 == r.1 => *last = r,
                _ => deduped.push(r),
            }
        }
        if deduped.len() < before {
            warnings.push(format!(
                "stay `{}`: {} duplicate (timestamp, feature) record(s); kept the last by file order",
                stay.label.stay_id,
                before - deduped.len()
            ));
        }
        deduped.sort_by_key(|&(t, _, _, order)| (t, order));
        let late = deduped.iter().filter(|r| r.0 / BIN_MINUTES > stay.label.last_bin()).count();
        if late > 0 {
            warnings.push(format!(
                "stay `{}`: {late} record(s) after end time are ignored",
                stay.label.stay_id
            ));
        }
        stay.records = deduped
            .into_iter()
            .map(|(timestamp, feature, value, _)| RawRecord {
                timestamp,
                feature,
                value,
            })
            .collect();
    }

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Ingested { stays, warnings })
}

/// A stay on the half-hour grid before imputation; `None` marks a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedStay {
    pub label: StayLabel,
    pub bins: Vec<u32>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Dense grid from bin 0 through the bin holding `end_time`. Within a bin the
/// latest record of each feature wins.
pub fn bin_stay(stay: &Stay, catalog: &FeatureCatalog) -> GriddedStay {
    let n_bins = stay.label.last_bin() as usize + 1;
    let mut values = vec![vec![None; catalog.len()]; n_bins];
    for r in &stay.records {
        let b = (r.timestamp / BIN_MINUTES) as usize;
        if b < n_bins {
            values[b][r.feature] = Some(r.value);
        }
    }
    GriddedStay {
        label: stay.label.clone(),
        bins: (0..n_bins as u32).collect(),
        values,
    }
}

/// Imputed stay with per-row weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStay {
    pub label: StayLabel,
    pub bins: Vec<u32>,
    pub x: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub weights: Vec<f64>,
}

impl BinnedStay {
    pub fn stay_id(&self) -> &str {
        &self.label.stay_id
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Indices of rows usable for scoring (positives: strictly before the event).
    pub fn eligible_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.bins
            .iter()
            .enumerate()
            .filter(|(_, &b)| self.label.is_eligible_bin(b))
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationConstants {
    pub ids: Vec<String>,
    pub values: Vec<Option<f64>>,
}

impl ImputationConstants {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).and_then(|k| self.values[k])
    }
}

/// Median over training stays of each stay's median observed value.
pub fn compute_imputation_constants<'a>(
    train: impl IntoIterator<Item = &'a GriddedStay>,
    catalog: &FeatureCatalog,
) -> ImputationConstants {
    let p = catalog.len();
    let mut per_patient: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut buf = Vec::new();
    for stay in train {
        for (k, medians) in per_patient.iter_mut().enumerate() {
            buf.clear();
            buf.extend(stay.values.iter().filter_map(|row| row[k]));
            if let Some(m) = stats::median_in_place(&mut buf) {
                medians.push(m);
            }
        }
    }
    ImputationConstants {
        ids: catalog.ids().map(str::to_string).collect(),
        values: per_patient
            .iter_mut()
            .map(|m| stats::median_in_place(m))
            .collect(),
    }
}

/// Forward-fill each feature; leading gaps take the imputation constant.
/// Weights default to uniform.
pub fn impute(stay: &GriddedStay, constants: &ImputationConstants) -> Result<BinnedStay> {
    let n = stay.bins.len();
    let p = constants.values.len();
    let mut x = vec![vec![0.0; p]; n];
    let mut observed = vec![vec![false; p]; n];
    for k in 0..p {
        let mut last = None;
        for i in 0..n {
            if let Some(v) = stay.values[i][k] {
                observed[i][k] = true;
                last = Some(v);
            }
            x[i][k] = match last {
                Some(v) => v,
                None => constants.values[k].ok_or_else(|| {
                    Error::data(format!(
                        "no imputation constant for feature `{}` (never observed in training)",
                        constants.ids[k]
                    ))
                })?,
            };
        }
    }
    Ok(BinnedStay {
        label: stay.label.clone(),
        bins: stay.bins.clone(),
        x,
        observed,
        weights: vec![1.0 / n as f64; n],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Train,
    Test,
}

/// Linear ramp from 0 at 72 h before the event to 1 at the event.
pub fn ramp_weight(minutes_before_event: f64) -> f64 {
    (1.0 - minutes_before_event / RAMP_MINUTES as f64).clamp(0.0, 1.0)
}

/// Training weights: negatives uniform, positives on the 72 h ramp with
/// older and post-event rows dropped; each stay normalized to sum 1.
/// Test mode keeps every row.
pub fn assign_weights(stay: &BinnedStay, mode: WeightMode) -> BinnedStay {
    if mode == WeightMode::Test {
        let n = stay.len().max(1) as f64;
        return BinnedStay {
            weights: vec![1.0 / n; stay.len()],
            ..stay.clone()
        };
    }
    let mut keep = Vec::with_capacity(stay.len());
    let mut raw = Vec::with_capacity(stay.len());
    for (i, &b) in stay.bins.iter().enumerate() {
        match stay.label.event_time {
            None => {
                keep.push(i);
                raw.push(1.0);
            }
            Some(event) => {
                let t = b * BIN_MINUTES;
                if t >= event || event - t > RAMP_MINUTES {
                    continue;
                }
                keep.push(i);
                raw.push(ramp_weight((event - t) as f64));
            }
        }
    }
    let total: f64 = raw.iter().sum();
    if keep.is_empty() || total <= 0.0 {
        log::warn!(
            "stay `{}` has no rows inside the 72 h training window; it contributes nothing to training",
            stay.stay_id()
        );
        return BinnedStay {
            label: stay.label.clone(),
            bins: Vec::new(),
            x: Vec::new(),
            observed: Vec::new(),
            weights: Vec::new(),
        };
    }
    BinnedStay {
        label: stay.label.clone(),
        bins: keep.iter().map(|&i| stay.bins[i]).collect(),
        x: keep.iter().map(|&i| stay.x[i].clone()).collect(),
        observed: keep.iter().map(|&i| stay.observed[i].clone()).collect(),
        weights: raw.iter().map(|w| w / total).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

fn sorted_by_class(labels: &[StayLabel]) -> (Vec<String>, Vec<String>) {
    let mut pos: Vec<String> = labels.iter().filter(|l| l.positive).map(|l| l.stay_id.clone()).collect();
    let mut neg: Vec<String> = labels.iter().filter(|l| !l.positive).map(|l| l.stay_id.clone()).collect();
    pos.sort();
    neg.sort();
    (pos, neg)
}

/// Stratified random split by stay.
pub fn split_cohort(labels: &[StayLabel], train_fraction: f64, seed: u64) -> Result<CohortSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let (mut pos, mut neg) = sorted_by_class(labels);
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::data(format!(
            "stratified split needs at least 2 positive and 2 negative stays (found {} and {})",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Split);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let take = |n: usize| ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (n_pos, n_neg) = (take(pos.len()), take(neg.len()));
    let train_ids = pos[..n_pos].iter().chain(&neg[..n_neg]).cloned().collect();
    let test_ids = pos[n_pos..].iter().chain(&neg[n_neg..]).cloned().collect();
    Ok(CohortSplit { train_ids, test_ids })
}

/// `k` stratified folds of stay ids; sizes differ by at most one.
pub fn grouped_kfold(labels: &[StayLabel], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::config(format!("cross-validation needs k >= 2 (got {k})")));
    }
    let (mut pos, mut neg) = sorted_by_class(labels);
    if pos.len() < k || neg.len() < k {
        return Err(Error::data(format!(
            "{k}-fold cross-validation needs at least {k} positive and {k} negative stays (found {} and {})",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Folds);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in pos.into_iter().chain(neg).enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(folds)
}
