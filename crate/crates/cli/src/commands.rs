use std::fs;
use std::path::{Path, PathBuf};

use eventscore::baselines::{restrict_table, ScoringTable};
use eventscore::cohort::{ingest_csv, FeatureCatalog, Stay};
use eventscore::eval::{roc_curve, ImportanceReport, Traces};
use eventscore::lasso::LassoPath;
use eventscore::model::{Provenance, ScoreModel};
use eventscore::pipeline::{self, Evaluation};
use eventscore::synth::{event_time_csv, event_time_summary, generate, SynthSpec};

use crate::config::RunConfig;
use crate::table::{coefficient_rows, render_text, to_csv};
use crate::{CliError, Result};

pub enum SynthSource {
    File(PathBuf),
    UShaped,
    EarlyEvent,
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, contents)?;
    log::info!("wrote {}", p.display());
    Ok(p)
}

fn csv_string(build: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    build(&mut w)?;
    let bytes = w.into_inner().map_err(|e| CliError::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a synthetic cohort: records, labels, catalog, ground truth, the
/// event-time histogram and the spec that produced them.
pub fn cmd_synth(source: &SynthSource, seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    let mut spec = match source {
        SynthSource::File(p) => SynthSpec::load(p)?,
        SynthSource::UShaped => SynthSpec::ushaped(),
        SynthSource::EarlyEvent => SynthSpec::early_event(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let g = generate(&spec)?;
    let truth = serde_json::to_string_pretty(&g.truth).map_err(eventscore::Error::from)?;
    Ok(vec![
        write(out, "records.csv", &g.records_csv)?,
        write(out, "labels.csv", &g.labels_csv)?,
        write(out, "catalog.json", g.catalog.to_json())?,
        write(out, "truth.json", truth + "\n")?,
        write(out, "event_times.csv", event_time_csv(&event_time_summary(&g.labels)))?,
        write(out, "spec.json", spec.to_json())?,
    ])
}

fn load_cohort(cfg: &RunConfig) -> Result<(Vec<Stay>, FeatureCatalog)> {
    let (records, labels) = cfg.data_files()?;
    let data = cfg.data_catalog()?;
    let ing = ingest_csv(records, labels, &data)?;
    for w in &ing.warnings {
        log::warn!("{w}");
    }
    Ok((ing.stays, data))
}

/// `created` comes only from SOURCE_DATE_EPOCH so that reruns stay
/// byte-identical.
fn created_timestamp() -> Option<String> {
    let secs: i64 = std::env::var("SOURCE_DATE_EPOCH").ok()?.trim().parse().ok()?;
    let t = chrono::DateTime::from_timestamp(secs, 0)?;
    Some(t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

pub struct FitArtifacts {
    pub model: ScoreModel,
    pub model_path: PathBuf,
    pub path_csv: PathBuf,
}

pub fn path_csv(path: &LassoPath, columns: &[String]) -> Result<String> {
    csv_string(|w| {
        let mut header: Vec<String> = [
            "index",
            "lambda",
            "intercept",
            "support",
            "l1_norm",
            "objective",
            "cv_mean_auc",
            "cv_std_auc",
            "converged",
        ]
        .map(String::from)
        .to_vec();
        header.extend(columns.iter().cloned());
        w.write_record(&header)?;
        for (i, f) in path.fits.iter().enumerate() {
            let mut row = vec![
                i.to_string(),
                f.lambda.to_string(),
                f.intercept.to_string(),
                f.support().to_string(),
                f.l1_norm().to_string(),
                path.objectives[i].to_string(),
                opt(path.cv_mean_auc.get(i).copied()),
                opt(path.cv_std_auc.get(i).copied()),
                f.converged.to_string(),
            ];
            row.extend(f.beta.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        Ok(())
    })
}

/// Fit one model and write `model.json` and `path.csv`. A model whose final
/// fit did not converge is still written, then reported as an error.
pub fn cmd_fit(cfg: &RunConfig) -> Result<FitArtifacts> {
    cfg.validate()?;
    let (stays, data) = load_cohort(cfg)?;
    let catalog = cfg.model_catalog(&data)?;
    let split = pipeline::split(&stays, &cfg.pipeline, cfg.seed)?;
    let prepared = pipeline::prepare(&stays, &data, &catalog, &split)?;
    let provenance = Provenance {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        created: created_timestamp(),
    };
    let fit = pipeline::fit_model(&prepared, cfg.encoding, &cfg.name, &cfg.pipeline, provenance)?;
    let out = cfg.out_dir();
    let model_path = write(&out, "model.json", fit.model.to_json())?;
    let path_csv = write(&out, "path.csv", path_csv(&fit.path, &fit.model.columns)?)?;
    if !fit.model.converged {
        return Err(CliError::NotConverged(format!(
            "model `{}` did not converge at λ = {:e} within {} sweeps",
            fit.model.name, fit.model.lambda, cfg.pipeline.solver.max_iter
        )));
    }
    Ok(FitArtifacts {
        model: fit.model,
        model_path,
        path_csv,
    })
}

/// Per-bin scores of every stay in the configured cohort.
pub fn cmd_score(cfg: &RunConfig, model_path: &Path) -> Result<PathBuf> {
    let model = ScoreModel::load(model_path)?;
    let (stays, data) = load_cohort(cfg)?;
    let series = model.score_stays(&stays, &data)?;
    let text = csv_string(|w| {
        w.write_record(["stay_id", "bin", "score"])?;
        for s in &series {
            for (bin, score) in s.stay.bins.iter().zip(&s.scores) {
                w.write_record([s.stay.stay_id(), &bin.to_string(), &score.to_string()])?;
            }
        }
        Ok(())
    })?;
    write(&cfg.out_dir(), "scores.csv", text)
}

pub fn importance_csv(r: &ImportanceReport) -> Result<String> {
    csv_string(|w| {
        w.write_record(["feature", "reduced_auc", "drop", "importance"])?;
        for f in &r.features {
            w.write_record([f.id.clone(), f.reduced_auc.to_string(), f.drop.to_string(), f.importance.to_string()])?;
        }
        Ok(())
    })
}

pub fn traces_csv(t: &Traces) -> Result<String> {
    csv_string(|w| {
        let mut header = vec!["lead_hours".to_string()];
        header.extend(t.columns.iter().cloned());
        w.write_record(&header)?;
        for (lead, row) in t.lead_hours.iter().zip(&t.values) {
            let mut rec = vec![lead.to_string()];
            rec.extend(row.iter().map(|v| opt(*v)));
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

fn tables_for(cfg: &RunConfig, data: &FeatureCatalog) -> Result<Vec<ScoringTable>> {
    let tables = if cfg.paths.tables.is_empty() {
        vec![ScoringTable::mews(), ScoringTable::qsofa()]
    } else {
        cfg.paths.tables.iter().map(ScoringTable::load).collect::<eventscore::Result<_>>()?
    };
    if !cfg.features.exclude_manual {
        return Ok(tables);
    }
    Ok(tables.iter().map(|t| restrict_table(t, data, true)).collect::<eventscore::Result<_>>()?)
}

fn evaluation_files(ev: &Evaluation) -> Result<Vec<(&'static str, String)>> {
    let r = &ev.report;
    let mut files = vec![("report.json", serde_json::to_string_pretty(r).map_err(eventscore::Error::from)? + "\n")];
    let rocs = ev
        .scorers
        .iter()
        .map(|s| Ok((s.name.as_str(), roc_curve(&s.stays)?)))
        .collect::<eventscore::Result<Vec<_>>>()?;
    files.push((
        "roc.csv",
        csv_string(|w| {
            w.write_record(["scorer", "threshold", "fpr", "tpr"])?;
            for (name, roc) in &rocs {
                for (t, fpr, tpr) in roc {
                    w.write_record([name.to_string(), t.to_string(), fpr.to_string(), tpr.to_string()])?;
                }
            }
            Ok(())
        })?,
    ));
    files.push((
        "comparisons.csv",
        csv_string(|w| {
            w.write_record(["scorer", "reference", "auc", "reference_auc", "p_value"])?;
            for c in &r.comparisons {
                w.write_record([
                    c.name.clone(),
                    c.reference.clone(),
                    c.auc.to_string(),
                    c.reference_auc.to_string(),
                    c.p_value.to_string(),
                ])?;
            }
            Ok(())
        })?,
    ));
    files.push((
        "detection.csv",
        csv_string(|w| {
            w.write_record(["baseline", "scorer", "threshold", "fpr", "median_lead_hours", "detection_rate"])?;
            for d in &r.detection {
                let rows = std::iter::once((&d.baseline, &d.own)).chain(d.matched.iter());
                for (name, m) in rows {
                    w.write_record([
                        d.baseline.clone(),
                        name.clone(),
                        m.threshold.to_string(),
                        m.fpr.to_string(),
                        opt(m.median_lead_hours),
                        m.detection_rate.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?,
    ));
    files.push(("event_times.csv", event_time_csv(&r.event_days)));
    if let Some(imp) = &r.importance {
        files.push(("importance.csv", importance_csv(imp)?));
    }
    if let Some(t) = &ev.traces {
        files.push(("traces.csv", traces_csv(t)?));
    }
    Ok(files)
}

/// Evaluate saved models against rule tables on the test split of `cfg.seed`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(Evaluation, Vec<PathBuf>)> {
    cfg.validate()?;
    if cfg.paths.models.is_empty() {
        return Err(CliError::Usage("no models to evaluate (`paths.models` or --model)".into()));
    }
    let (stays, data) = load_cohort(cfg)?;
    let models = cfg.paths.models.iter().map(ScoreModel::load).collect::<eventscore::Result<Vec<_>>>()?;
    for m in &models {
        if m.provenance.seed != cfg.seed {
            log::warn!(
                "model `{}` was fitted with seed {}, evaluating on the split of seed {}",
                m.name,
                m.provenance.seed,
                cfg.seed
            );
        }
    }
    let tables = tables_for(cfg, &data)?;
    let ev = pipeline::evaluate(&stays, &data, &models, &tables, &cfg.pipeline, &cfg.evaluation, cfg.seed)?;
    let out = cfg.out_dir();
    let paths = evaluation_files(&ev)?
        .into_iter()
        .map(|(name, text)| write(&out, name, text))
        .collect::<Result<_>>()?;
    Ok((ev, paths))
}

/// Coefficient table as CSV and aligned text; with a cohort config, also the
/// model's drop-one importance and contribution traces on its test split.
pub fn cmd_report(model_path: &Path, cfg: Option<&RunConfig>, out: &Path) -> Result<Vec<PathBuf>> {
    let model = ScoreModel::load(model_path)?;
    let rows = coefficient_rows(&model)?;
    let mut written = vec![
        write(out, "coefficients.csv", to_csv(&rows)?)?,
        write(out, "coefficients.txt", render_text(&model, &rows))?,
    ];
    if let Some(cfg) = cfg {
        cfg.validate()?;
        let (stays, data) = load_cohort(cfg)?;
        let split = pipeline::split(&stays, &cfg.pipeline, cfg.seed)?;
        if model.catalog.len() > 1 {
            let imp = pipeline::importance_for_model(&model, &stays, &data, &split, &cfg.pipeline)?;
            written.push(write(out, "importance.csv", importance_csv(&imp)?)?);
        }
        if model.ranges.is_some() {
            let test: Vec<Stay> = stays.into_iter().filter(|s| split.test_ids.contains(s.id())).collect();
            let series = model.score_stays(&test, &data)?;
            let t = pipeline::traces(
                &model,
                &series,
                cfg.evaluation.trace_window_hours,
                cfg.evaluation.trace_smoothing_hours,
            )?;
            written.push(write(out, "traces.csv", traces_csv(&t)?)?);
        }
    }
    Ok(written)
}
