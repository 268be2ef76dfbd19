//! Synthetic cohorts with planted feature–event relationships.
//!
//! Negatives sample every feature around its baseline. In positives,
//! `monotone-risk` features drift by `effect` and `u-shaped-risk` features
//! leave their normal band `[mean − effect, mean + effect)` on a per-stay side
//! as the event approaches. Drift starts `ramp_hours` before the event and
//! reaches full strength halfway through the ramp.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cohort::{FeatureCatalog, FeatureSpec, StayLabel, BIN_MINUTES};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    MonotoneRisk,
    UShapedRisk,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFeature {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub manual: bool,
    pub kind: FeatureKind,
    pub mean: f64,
    pub std: f64,
    /// Signed drift for monotone features; half-width of the normal band
    /// for u-shaped ones.
    #[serde(default)]
    pub effect: f64,
    #[serde(default = "one")]
    pub period_bins: u32,
    #[serde(default)]
    pub missing_prob: f64,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
    #[serde(default)]
    pub integer: bool,
}

fn one() -> u32 {
    1
}

fn default_background() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_stays: usize,
    pub positive_fraction: f64,
    pub features: Vec<SynthFeature>,
    pub min_stay_bins: u32,
    pub max_stay_bins: u32,
    pub ramp_hours: f64,
    /// Event times for positives, in hours since admission. When absent, the
    /// drawn stay length is the time to event, followed by a short
    /// post-event tail before discharge.
    #[serde(default)]
    pub event_window_hours: Option<[f64; 2]>,
    /// Per-row chance that any stay shows an out-of-band u-shaped value.
    #[serde(default = "default_background")]
    pub background_rate: f64,
    pub seed: u64,
}

const USHAPED_SPEC: &str = include_str!("../data/synth_ushaped.json");
const EARLY_EVENT_SPEC: &str = include_str!("../data/synth_early_event.json");
/// Longest discharge delay after an event, in bins.
const POST_EVENT_BINS: u32 = 24;

impl SynthSpec {
    /// Mixed u-shaped / monotone / noise cohort of 800 stays.
    pub fn ushaped() -> Self {
        Self::from_json_str(USHAPED_SPEC).expect("shipped spec is valid")
    }

    /// Events concentrated in the first six hours of the stay.
    pub fn early_event() -> Self {
        Self::from_json_str(EARLY_EVENT_SPEC).expect("shipped spec is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn catalog(&self) -> Result<FeatureCatalog> {
        FeatureCatalog::new(
            self.features
                .iter()
                .map(|f| {
                    let name = if f.name.is_empty() { &f.id } else { &f.name };
                    FeatureSpec {
                        manual: f.manual,
                        ..FeatureSpec::new(&f.id, name, &f.unit)
                    }
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_stays < 4 {
            return bad(format!("n_stays must be at least 4 (got {})", self.n_stays));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} must lie in (0, 1)", self.positive_fraction));
        }
        if self.features.is_empty() {
            return bad("spec lists no features".into());
        }
        self.catalog()?;
        if self.min_stay_bins < 1 || self.min_stay_bins > self.max_stay_bins {
            return bad("stay length bounds must satisfy 1 <= min_stay_bins <= max_stay_bins".into());
        }
        if !(self.ramp_hours > 0.0 && self.ramp_hours.is_finite()) {
            return bad("ramp_hours must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.background_rate) {
            return bad("background_rate must lie in [0, 1]".into());
        }
        let min_stay_hours = f64::from(self.min_stay_bins * BIN_MINUTES) / 60.0;
        match self.event_window_hours {
            None if self.ramp_hours >= min_stay_hours => {
                return bad(format!(
                    "ramp of {} h does not fit in the shortest stay ({min_stay_hours} h)",
                    self.ramp_hours
                ))
            }
            Some([lo, hi]) if !(lo >= 0.0 && lo < hi && hi <= min_stay_hours) => {
                return bad(format!("event window [{lo}, {hi}] h must lie within the shortest stay"))
            }
            _ => {}
        }
        for f in &self.features {
            let bad_f = |m: &str| bad(format!("feature `{}`: {m}", f.id));
            if !(f.mean.is_finite() && f.effect.is_finite()) {
                return bad_f("mean and effect must be finite");
            }
            if !(f.std > 0.0 && f.std.is_finite()) {
                return bad_f("std must be positive");
            }
            if f.period_bins == 0 {
                return bad_f("period_bins must be at least 1");
            }
            if !(0.0..1.0).contains(&f.missing_prob) {
                return bad_f("missing_prob must lie in [0, 1)");
            }
            if let (Some(lo), Some(hi)) = (f.min, f.max) {
                if lo >= hi {
                    return bad_f("min must be below max");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTruth {
    pub id: String,
    pub kind: FeatureKind,
    /// Band edges for u-shaped features.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub thresholds: Vec<f64>,
    /// Sign of the drift for monotone features.
    #[serde(default)]
    pub direction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub n_positive: usize,
    pub features: Vec<FeatureTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub records_csv: String,
    pub labels_csv: String,
    pub catalog: FeatureCatalog,
    pub labels: Vec<StayLabel>,
    pub truth: GroundTruth,
}

fn ushape_band(f: &SynthFeature) -> Option<(f64, f64)> {
    (f.kind == FeatureKind::UShapedRisk && f.effect > 0.0).then(|| (f.mean - f.effect, f.mean + f.effect))
}

struct FeatureSampler<'a> {
    f: &'a SynthFeature,
    normal: Normal<f64>,
    offset: f64,
    high_side: bool,
    phase: u32,
}

impl FeatureSampler<'_> {
    fn value(&self, rng: &mut ChaCha8Rng, progress: f64, background: f64) -> f64 {
        let f = self.f;
        let drift = (2.0 * progress).min(1.0);
        let v = match (f.kind, ushape_band(f)) {
            (FeatureKind::UShapedRisk, Some((lo, hi))) => {
                if rng.random::<f64>() < drift.max(background) {
                    let excess = (self.normal.sample(rng) - f.mean).abs();
                    if self.high_side {
                        hi + excess
                    } else {
                        lo - excess
                    }
                } else {
                    loop {
                        let v = self.normal.sample(rng);
                        if v > lo && v < hi {
                            break v;
                        }
                    }
                }
            }
            (FeatureKind::MonotoneRisk, _) => self.offset + self.normal.sample(rng) + f.effect * drift,
            _ => self.offset + self.normal.sample(rng),
        };
        let v = if f.integer { v.round() } else { (v * 100.0).round() / 100.0 };
        v.clamp(f.min.unwrap_or(f64::NEG_INFINITY), f.max.unwrap_or(f64::INFINITY))
    }
}

/// Deterministic cohort for `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Generated> {
    spec.validate()?;
    let catalog = spec.catalog()?;
    let mut rng = stream(spec.seed, Purpose::Synth);
    let n = spec.n_stays;
    let n_pos = ((spec.positive_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut is_pos: Vec<bool> = (0..n).map(|i| i < n_pos).collect();
    is_pos.shuffle(&mut rng);

    let width = n.to_string().len().max(4);
    let ramp_min = spec.ramp_hours * 60.0;
    let mut records = csv::Writer::from_writer(Vec::new());
    records.write_record(["stay_id", "timestamp_min", "feature_id", "value"])?;
    let mut labels_w = csv::Writer::from_writer(Vec::new());
    labels_w.write_record(["stay_id", "label", "event_time_min", "end_time_min"])?;
    let mut labels = Vec::with_capacity(n);

    for (i, &positive) in is_pos.iter().enumerate() {
        let stay_id = format!("stay{i:0width$}");
        let drawn = rng.random_range(spec.min_stay_bins..=spec.max_stay_bins) * BIN_MINUTES;
        let label = match (positive, spec.event_window_hours) {
            (false, _) => StayLabel::negative(&stay_id, drawn),
            (true, Some([a, b])) => {
                let t = (rng.random_range(a * 60.0..=b * 60.0).round() as u32).clamp(1, drawn);
                StayLabel::positive(&stay_id, t, drawn)
            }
            (true, None) => {
                // The drawn length is the pre-event part, so positives and
                // negatives have the same number of scoreable bins; a
                // max-aggregated score would otherwise separate them on
                // length alone.
                let t = drawn + rng.random_range(1..=BIN_MINUTES);
                let tail = rng.random_range(0..=POST_EVENT_BINS) * BIN_MINUTES;
                StayLabel::positive(&stay_id, t, t + tail)
            }
        };
        let end = label.end_time;
        let n_bins = end / BIN_MINUTES;

        let samplers: Vec<FeatureSampler> = spec
            .features
            .iter()
            .map(|f| {
                let offset = Normal::new(0.0, 0.5 * f.std).expect("std validated").sample(&mut rng);
                FeatureSampler {
                    f,
                    normal: Normal::new(f.mean, f.std).expect("std validated"),
                    offset,
                    high_side: rng.random_bool(0.5),
                    phase: rng.random_range(0..f.period_bins),
                }
            })
            .collect();

        for bin in 0..n_bins {
            for s in &samplers {
                if (bin + s.phase) % s.f.period_bins != 0 || rng.random::<f64>() < s.f.missing_prob {
                    continue;
                }
                let t = bin * BIN_MINUTES + rng.random_range(0..BIN_MINUTES);
                let progress = match label.event_time {
                    Some(ev) => (1.0 - (f64::from(ev) - f64::from(t)) / ramp_min).clamp(0.0, 1.0),
                    None => 0.0,
                };
                let v = s.value(&mut rng, progress, spec.background_rate);
                records.write_record([stay_id.as_str(), &t.to_string(), &s.f.id, &v.to_string()])?;
            }
        }
        labels_w.write_record([
            stay_id.as_str(),
            if positive { "1" } else { "0" },
            &label.event_time.map(|t| t.to_string()).unwrap_or_default(),
            &end.to_string(),
        ])?;
        labels.push(label);
    }

    let into_string = |w: csv::Writer<Vec<u8>>| -> Result<String> {
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    };
    let truth = GroundTruth {
        seed: spec.seed,
        n_positive: n_pos,
        features: spec
            .features
            .iter()
            .map(|f| FeatureTruth {
                id: f.id.clone(),
                kind: f.kind,
                thresholds: ushape_band(f).map(|(lo, hi)| vec![lo, hi]).unwrap_or_default(),
                direction: if f.kind == FeatureKind::MonotoneRisk { f.effect.signum() } else { 0.0 },
            })
            .collect(),
    };
    Ok(Generated {
        records_csv: into_string(records)?,
        labels_csv: into_string(labels_w)?,
        catalog,
        labels,
        truth,
    })
}

/// Count of positive-stay event times per day since admission (floored).
pub fn event_time_summary(labels: &[StayLabel]) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for t in labels.iter().filter(|l| l.positive).filter_map(|l| l.event_time) {
        *hist.entry(t / (24 * 60)).or_default() += 1;
    }
    hist
}

pub fn event_time_csv(hist: &BTreeMap<u32, usize>) -> String {
    let mut s = String::from("day,count\n");
    for (d, c) in hist {
        let _ = writeln!(s, "{d},{c}");
    }
    s
}
