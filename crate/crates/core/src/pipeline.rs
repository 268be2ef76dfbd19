//! End-to-end training and evaluation: split → impute → ranges → encode →
//! lasso path → CV-selected λ, and the comparison report against rule-based
//! baselines.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::baselines::ScoringTable;
use crate::cohort::{
    assign_weights, bin_stay, compute_imputation_constants, grouped_kfold, impute, split_cohort, BinnedStay,
    CohortSplit, FeatureCatalog, GriddedStay, ImputationConstants, Stay, StayLabel, WeightMode,
};
use crate::discretizer::{fit_range_map, DiscretizerConfig};
use crate::encoder::{fit_standardization, EncodedStay, Encoder};
use crate::error::{Error, Result};
use crate::eval::{self, DetectionSummary, ImportanceReport, StayScore, TraceInput, Traces};
use crate::lasso::{self, CvResult, FitOptions, FitProblem, LassoPath, PathConfig};
use crate::model::{Encoding, Provenance, ScoreModel, StaySeries, SCHEMA_VERSION};
use crate::synth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub cv_folds: usize,
    pub discretizer: DiscretizerConfig,
    pub path: PathConfig,
    pub solver: FitOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            cv_folds: 5,
            discretizer: DiscretizerConfig::default(),
            path: PathConfig::default(),
            solver: FitOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.cv_folds < 2 {
            return Err(Error::config("cv_folds must be at least 2"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::config("solver tol must be positive and max_iter at least 1"));
        }
        self.discretizer.validate()?;
        self.path.validate()
    }
}

pub fn labels_of(stays: &[Stay]) -> Vec<StayLabel> {
    stays.iter().map(|s| s.label.clone()).collect()
}

pub fn split(stays: &[Stay], cfg: &PipelineConfig, seed: u64) -> Result<CohortSplit> {
    split_cohort(&labels_of(stays), cfg.train_fraction, seed)
}

/// One training stay: all bins (for scoring) and its weighted training rows.
#[derive(Debug, Clone)]
pub struct TrainStay {
    pub full: BinnedStay,
    pub weighted: BinnedStay,
}

/// Imputed cohort over one catalog, with constants from the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub catalog: FeatureCatalog,
    pub constants: ImputationConstants,
    pub train: Vec<TrainStay>,
    pub test: Vec<BinnedStay>,
}

impl Prepared {
    pub fn train_labels(&self) -> Vec<StayLabel> {
        self.train.iter().map(|s| s.full.label.clone()).collect()
    }
}

pub fn prepare(stays: &[Stay], data: &FeatureCatalog, catalog: &FeatureCatalog, split: &CohortSplit) -> Result<Prepared> {
    if let Some(id) = catalog.ids().find(|id| data.index_of(id).is_none()) {
        return Err(Error::data(format!("feature `{id}` is absent from the data catalog")));
    }
    let gridded: Vec<GriddedStay> = stays.iter().map(|s| bin_stay(&s.project(data, catalog), catalog)).collect();
    let is_train = |g: &GriddedStay| split.train_ids.contains(&g.label.stay_id);
    let constants = compute_imputation_constants(gridded.iter().filter(|g| is_train(g)), catalog);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for g in &gridded {
        let full = impute(g, &constants)?;
        if is_train(g) {
            let weighted = assign_weights(&full, WeightMode::Train);
            train.push(TrainStay { full, weighted });
        } else {
            test.push(full);
        }
    }
    Ok(Prepared {
        catalog: catalog.clone(),
        constants,
        train,
        test,
    })
}

/// Everything produced by one model fit.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: ScoreModel,
    pub path: LassoPath,
    pub cv: CvResult,
    pub folds: Vec<Vec<String>>,
    pub encoder: Encoder,
    pub train: Vec<EncodedStay>,
}

/// Encode the training split with the encoder's columns.
pub fn encode_train(prepared: &Prepared, encoder: &Encoder) -> Result<Vec<EncodedStay>> {
    prepared
        .train
        .iter()
        .map(|t| EncodedStay::new(encoder, &t.full, Some(&t.weighted)))
        .collect()
}

pub fn fit_model(
    prepared: &Prepared,
    encoding: Encoding,
    name: &str,
    cfg: &PipelineConfig,
    provenance: Provenance,
) -> Result<FitOutput> {
    cfg.validate()?;
    let weighted: Vec<BinnedStay> = prepared.train.iter().map(|t| t.weighted.clone()).collect();
    let (encoder, ranges, standardization) = match encoding {
        Encoding::MultiHot => {
            let map = fit_range_map(&weighted, &prepared.catalog, &cfg.discretizer);
            (Encoder::multi_hot(&map, &prepared.catalog)?, Some(map), None)
        }
        Encoding::Raw => {
            let std = fit_standardization(&weighted, &prepared.catalog);
            (Encoder::raw(&std, &prepared.catalog)?, None, Some(std))
        }
    };
    let p = encoder.n_columns();
    if p == 0 {
        return Err(Error::data(format!("model `{name}`: no feature yields a usable column")));
    }
    let train = encode_train(prepared, &encoder)?;
    let folds = grouped_kfold(&prepared.train_labels(), cfg.cv_folds, provenance.seed)?;
    let problem = FitProblem::from_stays(train.iter().filter(|s| !s.train.is_empty()), p)?;
    let grid = lasso::lambda_grid(lasso::lambda_max(&problem).lambda, &cfg.path);
    let mut path = lasso::path_on_grid(&problem, &grid, &cfg.solver);
    let cv = lasso::select_lambda_cv(&train, &folds, &grid, p, &cfg.solver)?;
    path.cv_mean_auc = cv.mean_auc.clone();
    path.cv_std_auc = cv.std_auc.clone();
    let chosen = &path.fits[cv.best_index];
    log::info!(
        "model `{name}`: λ = {:.4e} (index {}), CV AUC {:.4}, {} of {p} coefficients nonzero",
        cv.best_lambda,
        cv.best_index,
        cv.mean_auc[cv.best_index],
        chosen.support()
    );
    let model = ScoreModel {
        schema: SCHEMA_VERSION,
        name: name.to_string(),
        encoding,
        catalog: prepared.catalog.clone(),
        imputation: prepared.constants.clone(),
        ranges,
        standardization,
        intercept: chosen.intercept,
        columns: encoder.column_labels().to_vec(),
        coefficients: chosen.beta.clone(),
        lambda: chosen.lambda,
        converged: chosen.converged,
        provenance,
    };
    Ok(FitOutput {
        model,
        path,
        cv,
        folds,
        encoder,
        train,
    })
}

/// Drop-one importance for a fitted model at its own λ.
pub fn importance(fit: &FitOutput, cfg: &PipelineConfig) -> Result<ImportanceReport> {
    eval::feature_importance(&fit.train, &fit.folds, fit.model.lambda, &fit.encoder.feature_columns(), &cfg.solver)
}

/// Rebuild the training encoding of a saved model from the raw cohort (same
/// split, same stored ranges) and compute its drop-one importance.
pub fn importance_for_model(
    model: &ScoreModel,
    stays: &[Stay],
    data: &FeatureCatalog,
    split: &CohortSplit,
    cfg: &PipelineConfig,
) -> Result<ImportanceReport> {
    let prepared = prepare(stays, data, &model.catalog, split)?;
    let encoder = model.encoder()?;
    let train = encode_train(&prepared, &encoder)?;
    let folds = grouped_kfold(&prepared.train_labels(), cfg.cv_folds, model.provenance.seed)?;
    eval::feature_importance(&train, &folds, model.lambda, &encoder.feature_columns(), &cfg.solver)
}

/// Mean contribution traces of a multi-hot model over positive stays.
pub fn traces(model: &ScoreModel, series: &[StaySeries], window_hours: u32, smoothing_hours: u32) -> Result<Traces> {
    let enc = model.encoder()?;
    let inputs = series
        .iter()
        .filter(|s| s.stay.label.positive)
        .map(|s| {
            let rows: Vec<usize> = s.stay.eligible_rows().collect();
            Ok(TraceInput {
                event_time: s.stay.label.event_time.expect("positive stays carry an event time"),
                bins: rows.iter().map(|&j| s.stay.bins[j]).collect(),
                contributions: rows
                    .iter()
                    .map(|&j| Ok(model.contributions(&enc.encode_row(&s.stay.x[j])?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    eval::contribution_traces(&inputs, &model.columns, window_hours, smoothing_hours)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub trace_window_hours: u32,
    pub trace_smoothing_hours: u32,
    pub importance: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            trace_window_hours: 72,
            trace_smoothing_hours: 12,
            importance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    Model,
    Baseline,
}

/// Stay-level scores of one scorer on the test split.
#[derive(Debug, Clone)]
pub struct Scored {
    pub name: String,
    pub kind: ScorerKind,
    /// Feature set; comparisons happen within a group.
    pub group: String,
    pub multi_hot: bool,
    pub threshold: Option<f64>,
    pub stays: Vec<StayScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerResult {
    pub name: String,
    pub kind: ScorerKind,
    pub group: String,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub name: String,
    pub reference: String,
    pub auc: f64,
    pub reference_auc: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub threshold: f64,
    pub fpr: f64,
    pub median_lead_hours: Option<f64>,
    pub detection_rate: f64,
}

impl DetectionResult {
    fn new(threshold: f64, fpr: f64, d: &DetectionSummary) -> Self {
        Self {
            threshold,
            fpr,
            median_lead_hours: d.median_lead_hours,
            detection_rate: d.detection_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDetection {
    pub baseline: String,
    /// The baseline at its own alarm threshold.
    pub own: DetectionResult,
    /// Each model at the threshold matching the baseline's FPR, by model name.
    pub matched: BTreeMap<String, DetectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test_stays: usize,
    pub n_test_positive: usize,
    pub scorers: Vec<ScorerResult>,
    pub comparisons: Vec<Comparison>,
    pub detection: Vec<BaselineDetection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<ImportanceReport>,
    /// Events per day since admission over all positive stays.
    pub event_days: BTreeMap<u32, usize>,
}

fn group_key<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    let mut v: Vec<&str> = ids.collect();
    v.sort_unstable();
    v.join(",")
}

/// Score test stays with a saved model.
pub fn score_model(model: &ScoreModel, stays: &[Stay], data: &FeatureCatalog) -> Result<(Scored, Vec<StaySeries>)> {
    let series = model.score_stays(stays, data)?;
    Ok((
        Scored {
            name: model.name.clone(),
            kind: ScorerKind::Model,
            group: group_key(model.catalog.ids()),
            multi_hot: model.encoding == Encoding::MultiHot,
            threshold: None,
            stays: series.iter().map(StaySeries::stay_score).collect(),
        },
        series,
    ))
}

/// Score imputed stays with a rule table.
pub fn score_table(table: &ScoringTable, catalog: &FeatureCatalog, stays: &[BinnedStay]) -> Result<Scored> {
    let bound = table.bind(catalog)?;
    Ok(Scored {
        name: table.name.clone(),
        kind: ScorerKind::Baseline,
        group: group_key(table.feature_ids()),
        multi_hot: false,
        threshold: Some(f64::from(table.threshold)),
        stays: stays.iter().map(|s| bound.stay_score(s)).collect::<Result<_>>()?,
    })
}

fn stay_levels(s: &Scored) -> Vec<f64> {
    s.stays.iter().map(|x| x.stay_level).collect()
}

fn negatives(s: &Scored) -> Vec<f64> {
    s.stays.iter().filter(|x| !x.positive).map(|x| x.stay_level).collect()
}

/// AUCs, within-group DeLong tests against the group's multi-hot model, and
/// FPR-matched detection times for every model against every baseline.
pub fn compare(scorers: &[Scored]) -> Result<EvalReport> {
    let first = scorers.first().ok_or_else(|| Error::data("nothing to evaluate"))?;
    let ids: Vec<&str> = first.stays.iter().map(|s| s.stay_id.as_str()).collect();
    let mut names = HashSet::new();
    for s in scorers {
        if !names.insert(s.name.as_str()) {
            return Err(Error::config(format!("two scorers are named `{}`", s.name)));
        }
        if s.stays.len() != ids.len() || s.stays.iter().zip(&ids).any(|(a, b)| a.stay_id != *b) {
            return Err(Error::data(format!("scorer `{}` was run on a different set of stays", s.name)));
        }
    }
    let labels: Vec<bool> = first.stays.iter().map(|s| s.positive).collect();
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::data("test split holds a single class"));
    }
    let mut results = Vec::new();
    for s in scorers {
        results.push(ScorerResult {
            name: s.name.clone(),
            kind: s.kind,
            group: s.group.clone(),
            auc: eval::auc(&stay_levels(s), &labels)?,
        });
    }
    let mut comparisons = Vec::new();
    let mut seen = HashSet::new();
    for s in scorers {
        if !seen.insert(s.group.as_str()) {
            continue;
        }
        let Some(reference) = scorers.iter().find(|r| r.group == s.group && r.multi_hot) else {
            continue;
        };
        for other in scorers.iter().filter(|o| o.group == s.group) {
            let d = eval::delong_test(&stay_levels(other), &stay_levels(reference), &labels)?;
            comparisons.push(Comparison {
                name: other.name.clone(),
                reference: reference.name.clone(),
                auc: d.auc_a,
                reference_auc: d.auc_b,
                p_value: d.p_value,
            });
        }
    }
    let mut detection = Vec::new();
    for b in scorers.iter().filter(|s| s.kind == ScorerKind::Baseline) {
        let thr = b.threshold.expect("baselines carry a threshold");
        let own = DetectionResult::new(thr, eval::false_positive_rate(&negatives(b), thr), &eval::median_detection_time(&b.stays, thr)?);
        let mut matched = BTreeMap::new();
        for m in scorers.iter().filter(|s| s.kind == ScorerKind::Model) {
            let mt = eval::matched_threshold(&negatives(b), thr, &negatives(m))?;
            let det = eval::median_detection_time(&m.stays, mt.threshold)?;
            matched.insert(m.name.clone(), DetectionResult::new(mt.threshold, mt.model_fpr, &det));
        }
        detection.push(BaselineDetection {
            baseline: b.name.clone(),
            own,
            matched,
        });
    }
    Ok(EvalReport {
        n_test_stays: labels.len(),
        n_test_positive: n_pos,
        scorers: results,
        comparisons,
        detection,
        importance: None,
        event_days: BTreeMap::new(),
    })
}

/// Full evaluation of saved models and rule tables on the test split
/// defined by `seed`.
pub struct Evaluation {
    pub report: EvalReport,
    pub scorers: Vec<Scored>,
    /// Contribution traces of the first multi-hot model, if any.
    pub traces: Option<Traces>,
}

pub fn evaluate(
    stays: &[Stay],
    data: &FeatureCatalog,
    models: &[ScoreModel],
    tables: &[ScoringTable],
    cfg: &PipelineConfig,
    opts: &EvalOptions,
    seed: u64,
) -> Result<Evaluation> {
    let split = split(stays, cfg, seed)?;
    let test_stays: Vec<Stay> = stays.iter().filter(|s| split.test_ids.contains(s.id())).cloned().collect();
    let mut scorers = Vec::new();
    let mut traces = None;
    let mut importance = None;
    for m in models {
        let (scored, series) = score_model(m, &test_stays, data)?;
        if m.encoding == Encoding::MultiHot && traces.is_none() {
            traces = Some(self::traces(m, &series, opts.trace_window_hours, opts.trace_smoothing_hours)?);
            if opts.importance && m.catalog.len() > 1 {
                importance = Some(importance_for_model(m, stays, data, &split, cfg)?);
            }
        }
        scorers.push(scored);
    }
    if !tables.is_empty() {
        let prepared = prepare(stays, data, data, &split)?;
        for t in tables {
            scorers.push(score_table(t, data, &prepared.test)?);
        }
    }
    let mut report = compare(&scorers)?;
    report.importance = importance;
    report.event_days = synth::event_time_summary(&labels_of(stays));
    Ok(Evaluation {
        report,
        scorers,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::ingest_readers;
    use crate::synth::{generate, SynthSpec};

    fn cohort(spec: &SynthSpec) -> (Vec<Stay>, FeatureCatalog) {
        let g = generate(spec).unwrap();
        let ing = ingest_readers(g.records_csv.as_bytes(), "r", g.labels_csv.as_bytes(), "l", &g.catalog).unwrap();
        (ing.stays, g.catalog)
    }

    fn quick() -> PipelineConfig {
        PipelineConfig {
            path: PathConfig {
                n_lambdas: 15,
                lambda_min_ratio: 1e-2,
            },
            ..Default::default()
        }
    }

    fn prov(seed: u64) -> Provenance {
        Provenance {
            seed,
            config_hash: String::new(),
            created: None,
        }
    }

    #[test]
    fn small_cohort_end_to_end() {
        let spec = SynthSpec {
            n_stays: 120,
            min_stay_bins: 60,
            max_stay_bins: 120,
            seed: 11,
            ..SynthSpec::ushaped()
        };
        let (stays, cat) = cohort(&spec);
        let cfg = quick();
        let sp = split(&stays, &cfg, 11).unwrap();
        let prep = prepare(&stays, &cat, &cat, &sp).unwrap();
        for t in &prep.train {
            if !t.weighted.is_empty() {
                assert!((t.weighted.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let fit = fit_model(&prep, Encoding::MultiHot, "EventScore", &cfg, prov(11)).unwrap();
        assert_eq!(fit.path.fits[0].support(), 0);
        assert!(fit.model.coefficients.iter().any(|&b| b != 0.0));

        // the planted u-shaped feature is in the selected support
        let hr = fit.encoder.feature_columns().into_iter().find(|(id, _)| id == "HR").unwrap().1;
        assert!(fit.model.coefficients[hr].iter().any(|&b| b != 0.0));

        let tables = [ScoringTable::qsofa(), ScoringTable::mews()];
        let ev = evaluate(&stays, &cat, &[fit.model.clone()], &tables, &cfg, &EvalOptions::default(), 11).unwrap();
        let r = &ev.report;
        assert_eq!(r.scorers.len(), 3);
        assert!(r.comparisons.iter().all(|c| (0.0..=1.0).contains(&c.p_value)));
        let own = r.comparisons.iter().find(|c| c.name == "EventScore").unwrap();
        assert_eq!(own.p_value, 1.0);
        let es = r.scorers[0].auc;
        assert!(es > r.scorers[1].auc && es > r.scorers[2].auc, "{:?}", r.scorers);
        for d in &r.detection {
            assert!(d.matched["EventScore"].fpr <= d.own.fpr);
        }
        let imp = r.importance.as_ref().unwrap();
        assert_eq!(imp.features.len(), fit.encoder.feature_columns().len());
        assert!(ev.traces.is_some());
    }

    #[test]
    fn training_scores_are_reproduced_by_the_saved_model() {
        let spec = SynthSpec {
            n_stays: 60,
            min_stay_bins: 60,
            max_stay_bins: 100,
            seed: 4,
            ..SynthSpec::ushaped()
        };
        let (stays, cat) = cohort(&spec);
        let cfg = quick();
        let sp = split(&stays, &cfg, 4).unwrap();
        let prep = prepare(&stays, &cat, &cat, &sp).unwrap();
        let fit = fit_model(&prep, Encoding::MultiHot, "m", &cfg, prov(4)).unwrap();
        let glm = fit.model.glm();
        let train_stays: Vec<Stay> = stays.iter().filter(|s| sp.train_ids.contains(s.id())).cloned().collect();
        let loaded = ScoreModel::from_json_str(&fit.model.to_json()).unwrap();
        let series = loaded.score_stays(&train_stays, &cat).unwrap();
        for (enc, s) in fit.train.iter().zip(&series) {
            let direct = lasso::stay_level_score(&glm, enc);
            assert!((direct - s.stay_score().stay_level).abs() <= 1e-12);
        }
    }
}
