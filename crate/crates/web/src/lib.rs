//! Browser demo: synthesize a cohort, fit EventScore next to a raw-feature
//! logistic regression, and explore the fit. Everything crosses the JS
//! boundary as JSON strings.

use eventscore::baselines::ScoringTable;
use eventscore::cohort::ingest_readers;
use eventscore::eval::roc_curve;
use eventscore::lasso::PathConfig;
use eventscore::model::{Encoding, Provenance, ScoreModel};
use eventscore::pipeline::{self, EvalOptions, PipelineConfig};
use eventscore::synth::{generate, SynthSpec};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Serialize)]
struct Slider {
    id: String,
    name: String,
    unit: String,
    min: f64,
    max: f64,
    step: f64,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Curve {
    name: String,
    auc: f64,
    /// (fpr, tpr) from the strictest threshold.
    points: Vec<(f64, f64)>,
}

#[wasm_bindgen]
pub struct Demo {
    model: ScoreModel,
    sliders: Vec<Slider>,
    summary: serde_json::Value,
    curves: Vec<Curve>,
}

impl Demo {
    /// `effect_scale` multiplies every planted effect (0 = no signal).
    pub fn build(n_stays: usize, seed: u32, effect_scale: f64) -> eventscore::Result<Self> {
        let base = SynthSpec::ushaped();
        let mut spec = SynthSpec {
            n_stays,
            min_stay_bins: 60,
            max_stay_bins: 160,
            seed: u64::from(seed),
            ..base
        };
        for f in &mut spec.features {
            f.effect *= effect_scale.max(0.0);
        }
        let g = generate(&spec)?;
        let ing = ingest_readers(g.records_csv.as_bytes(), "records", g.labels_csv.as_bytes(), "labels", &g.catalog)?;
        let cfg = PipelineConfig {
            path: PathConfig {
                n_lambdas: 20,
                lambda_min_ratio: 1e-2,
            },
            ..Default::default()
        };
        let split = pipeline::split(&ing.stays, &cfg, spec.seed)?;
        let prepared = pipeline::prepare(&ing.stays, &g.catalog, &g.catalog, &split)?;
        let provenance = Provenance {
            seed: spec.seed,
            config_hash: String::new(),
            created: None,
        };
        let fit = pipeline::fit_model(&prepared, Encoding::MultiHot, "EventScore", &cfg, provenance.clone())?;
        let raw = pipeline::fit_model(&prepared, Encoding::Raw, "Raw LR", &cfg, provenance)?;
        let opts = EvalOptions {
            importance: false,
            ..Default::default()
        };
        let tables = [ScoringTable::mews(), ScoringTable::qsofa()];
        let models = [fit.model.clone(), raw.model];
        let ev = pipeline::evaluate(&ing.stays, &g.catalog, &models, &tables, &cfg, &opts, spec.seed)?;

        let curves = ev
            .scorers
            .iter()
            .zip(&ev.report.scorers)
            .map(|(s, r)| {
                Ok(Curve {
                    name: s.name.clone(),
                    auc: r.auc,
                    points: roc_curve(&s.stays)?.into_iter().map(|(_, f, t)| (f, t)).collect(),
                })
            })
            .collect::<eventscore::Result<_>>()?;

        let path = &fit.path;
        let summary = json!({
            "n_stays": n_stays,
            "n_positive": g.truth.n_positive,
            "n_test": ev.report.n_test_stays,
            "lambdas": path.lambdas,
            "support": path.fits.iter().map(|f| f.support()).collect::<Vec<_>>(),
            "cv_mean_auc": path.cv_mean_auc,
            "chosen": fit.cv.best_index,
        });

        let sliders = spec
            .features
            .iter()
            .map(|f| {
                let spread = 4.0 * f.std + f.effect.abs();
                let lo = f.min.unwrap_or(f64::NEG_INFINITY).max(f.mean - spread);
                let hi = f.max.unwrap_or(f64::INFINITY).min(f.mean + spread);
                Slider {
                    id: f.id.clone(),
                    name: if f.name.is_empty() { f.id.clone() } else { f.name.clone() },
                    unit: f.unit.clone(),
                    min: lo.floor(),
                    max: hi.ceil(),
                    step: if f.integer { 1.0 } else { 0.1 },
                    value: fit.model.imputation.get(&f.id).unwrap_or(f.mean),
                }
            })
            .collect();
        Ok(Self {
            model: fit.model,
            sliders,
            summary,
            curves,
        })
    }

    /// Per-feature contributions of one vector of readings, in slider order.
    pub fn score_values(&self, values: &[f64]) -> eventscore::Result<serde_json::Value> {
        if values.len() != self.sliders.len() {
            return Err(eventscore::Error::Data(format!(
                "expected {} values, got {}",
                self.sliders.len(),
                values.len()
            )));
        }
        let row: Vec<f64> = self
            .model
            .catalog
            .ids()
            .map(|id| values[self.sliders.iter().position(|s| s.id == id).expect("model features come from the spec")])
            .collect();
        let enc = self.model.encoder()?;
        let x = enc.encode_row(&row)?;
        let contrib = self.model.contributions(&x);
        let mut parts = Vec::new();
        for (id, cols) in enc.feature_columns() {
            let k = cols.clone().find(|&c| x[c] != 0.0);
            parts.push(json!({
                "feature": id,
                "range": k.map(|c| self.model.columns[c].clone()),
                "contribution": contrib[cols].iter().sum::<f64>(),
            }));
        }
        let score = self.model.intercept + contrib.iter().sum::<f64>();
        Ok(json!({
            "intercept": self.model.intercept,
            "score": score,
            "probability": 1.0 / (1.0 + (-score).exp()),
            "contributions": parts,
        }))
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Generate a cohort and fit both models.
    #[wasm_bindgen(constructor)]
    pub fn new(n_stays: usize, seed: u32, effect_scale: f64) -> Result<Demo, JsError> {
        Self::build(n_stays, seed, effect_scale).map_err(js_err)
    }

    /// λ path with support size and CV AUC, and the chosen index.
    pub fn summary_json(&self) -> String {
        self.summary.to_string()
    }

    /// The EventScore coefficient table, one row per (feature, range).
    pub fn table_json(&self) -> Result<String, JsError> {
        let rows = self.model.coefficient_rows().map_err(js_err)?;
        serde_json::to_string(&rows).map_err(js_err)
    }

    /// Test-split ROC curves of both models and the rule tables.
    pub fn roc_json(&self) -> String {
        serde_json::to_string(&self.curves).expect("curves serialize")
    }

    pub fn sliders_json(&self) -> String {
        serde_json::to_string(&self.sliders).expect("sliders serialize")
    }

    /// Score one set of readings given as a JSON array in slider order.
    pub fn score_json(&self, values: &str) -> Result<String, JsError> {
        let values: Vec<f64> = serde_json::from_str(values).map_err(js_err)?;
        Ok(self.score_values(&values).map_err(js_err)?.to_string())
    }
}
