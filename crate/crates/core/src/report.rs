//! Report assembly and rendering: `report.json`, `report.md`, `scatter.csv`.
//!
//! Everything here is a pure function of its inputs. No timestamps, no hash
//! map iteration order leaks into output.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfgen::CounterfactualSet;
use crate::dataspec::Dataset;
use crate::error::{CatError, Result};
use crate::metrics::{
    comparable_subset, compute_accuracy, compute_attentiveness, count_correct, fmt_pct,
    significance_gate, AttentivenessReport, CorrelationReport, SubsetMode,
};
use crate::modelio::PredictionTable;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const SCATTER_CSV: &str = "scatter.csv";

/// One (model, dataset) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub dataset: String,
    pub accuracy: f64,
    pub majority: f64,
    pub subset_mode: Option<SubsetMode>,
    pub attentiveness: AttentivenessReport,
    pub correlation: Option<CorrelationReport>,
}

impl ReportRow {
    /// `mean ± std`, or `-` when the metric is null or accuracy is not
    /// significantly above the majority baseline.
    pub fn attentiveness_cell(&self) -> String {
        let a = &self.attentiveness;
        match (a.significant, a.attentiveness_mean, a.attentiveness_std) {
            (true, Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => "-".to_string(),
        }
    }
}

/// Splits a model's predictions into originals (dev ids) and the rest.
pub fn split_predictions(ds: &Dataset, all: &PredictionTable) -> (PredictionTable, PredictionTable) {
    let dev: HashSet<&str> = ds.instances().iter().map(|i| i.id.as_str()).collect();
    all.iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .partition(|(k, _)| dev.contains(k.as_str()))
}

/// Scores every full-input model. `models` holds each model's predictions
/// over dev plus counterfactual ids; rows come out in the given order.
pub fn score_models(
    ds: &Dataset,
    cfs: &CounterfactualSet,
    models: &[(String, PredictionTable)],
    correlation: Option<&CorrelationReport>,
    subset_mode: Option<SubsetMode>,
    alpha: f64,
) -> Result<Vec<ReportRow>> {
    let (_, majority_count) = ds.majority_label()?;
    let majority_frac = majority_count as f64 / ds.len() as f64;
    let dataset = format!("{}/{}", ds.task.task_id, ds.split);

    let split: Vec<(&str, PredictionTable, PredictionTable)> = models
        .iter()
        .map(|(m, t)| {
            let (o, c) = split_predictions(ds, t);
            (m.as_str(), o, c)
        })
        .collect();
    let shared = match subset_mode {
        Some(mode) => {
            let per: Vec<(&str, &PredictionTable)> = split.iter().map(|(m, o, _)| (*m, o)).collect();
            Some(comparable_subset(&per, ds, mode)?)
        }
        None => None,
    };

    let mut rows = Vec::with_capacity(split.len());
    for (model, originals, cf_preds) in &split {
        let accuracy = compute_accuracy(originals, ds)
            .map_err(|e| CatError::Data(format!("{model}: {e}")))?;
        let mut att = compute_attentiveness(model, ds, originals, cfs, cf_preds, shared.as_deref())?;
        att.significant = significance_gate(count_correct(originals, ds)?, ds.len(), majority_frac, alpha);
        rows.push(ReportRow {
            model_id: model.to_string(),
            dataset: dataset.clone(),
            accuracy,
            majority: crate::metrics::percent(majority_count, ds.len()),
            subset_mode,
            attentiveness: att,
            correlation: correlation.cloned(),
        });
    }
    Ok(rows)
}

pub fn render_json(rows: &[ReportRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("report rows serialize");
    s.push('\n');
    s
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "| Model | Dataset | Accuracy | Attentiveness | Strict | Partial-input corr. | Evaluable |\n\
         |---|---|---:|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let a = &r.attentiveness;
        let strict = if a.significant { fmt_pct(a.strict_mean) } else { "-".into() };
        let corr = fmt_pct(r.correlation.as_ref().map(|c| c.partial_input_correlation));
        out.push_str(&format!(
            "| {} | {} | {:.1} | {} | {} | {} | {}/{} |\n",
            r.model_id,
            r.dataset,
            r.accuracy,
            r.attentiveness_cell(),
            strict,
            corr,
            a.n_non_default,
            a.n_dev
        ));
    }
    out
}

/// `x` = partial-input correlation, `y` = attentiveness mean. Rows without
/// both values are left out.
pub fn render_scatter(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CatError::Data(format!("writing scatter csv: {e}"));
    w.write_record(["x", "y", "label"]).map_err(csv_err)?;
    for r in rows {
        let (Some(c), Some(y)) = (&r.correlation, r.attentiveness.attentiveness_mean) else {
            continue;
        };
        w.write_record([
            c.partial_input_correlation.to_string(),
            y.to_string(),
            format!("{}/{}", r.model_id, r.dataset),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CatError::Data(format!("writing scatter csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub markdown: PathBuf,
    pub scatter: PathBuf,
}

pub fn write_reports(dir: &Path, rows: &[ReportRow]) -> Result<ReportPaths> {
    fs::create_dir_all(dir).map_err(|e| CatError::io(dir, e))?;
    let paths = ReportPaths {
        json: dir.join(REPORT_JSON),
        markdown: dir.join(REPORT_MD),
        scatter: dir.join(SCATTER_CSV),
    };
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| CatError::io(p, e));
    write(&paths.json, render_json(rows))?;
    write(&paths.markdown, render_markdown(rows))?;
    write(&paths.scatter, render_scatter(rows)?)?;
    Ok(paths)
}
