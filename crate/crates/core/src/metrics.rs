//! Scoring: attentiveness (flip rate on counterfactuals), accuracy,
//! partial-input correlation, comparable subsets and the significance gate.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::cfgen::CounterfactualSet;
use crate::dataspec::Dataset;
use crate::error::{CatError, Result};
use crate::modelio::{Prediction, PredictionTable};

pub const NO_NON_DEFAULT: &str = "no non-default predictions";
pub const EMPTY_COMPARABLE: &str = "empty comparable subset";
pub const DEFAULT_ALPHA: f64 = 0.05;

/// `count / total` as a percentage. Every percentage in the crate goes
/// through here so that equal ratios produce bit-equal floats.
pub fn percent(count: usize, total: usize) -> f64 {
    count as f64 / total as f64 * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentivenessReport {
    pub model_id: String,
    pub n_dev: usize,
    /// Size of the subset the rates were computed on.
    pub n_non_default: usize,
    pub k: usize,
    /// Fraction of flipped predictions for each sample index.
    pub per_sample_rates: Vec<f64>,
    pub attentiveness_mean: Option<f64>,
    /// Population standard deviation of the per-sample rates, in points.
    pub attentiveness_std: Option<f64>,
    /// Share of counterfactuals predicted as the default label.
    pub strict_mean: Option<f64>,
    pub unparseable_count: usize,
    /// Whether standard accuracy clears the significance gate. Left `true`
    /// until [`significance_gate`] has been applied.
    pub significant: bool,
    pub null_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model_id: String,
    pub partial_accuracy: f64,
    pub majority: f64,
    pub partial_input_correlation: f64,
}

fn lookup<'a>(table: &'a PredictionTable, id: &str, context: &str) -> Result<&'a Prediction> {
    table.get(id).ok_or_else(|| CatError::MissingPrediction {
        id: id.to_string(),
        context: context.to_string(),
    })
}

/// Dev ids whose original prediction is a real, non-default label, in
/// dataset order.
pub fn select_evaluable(ds: &Dataset, originals: &PredictionTable) -> Result<Vec<String>> {
    let default = &ds.task.default_label;
    let mut out = Vec::new();
    for inst in ds.instances() {
        match lookup(originals, &inst.id, "original predictions")? {
            Prediction::Label(l) if l != default => out.push(inst.id.clone()),
            _ => {}
        }
    }
    Ok(out)
}

/// Flip-rate attentiveness. For sample index `j`, the rate is the share of
/// evaluable originals whose `j`-th counterfactual prediction differs from
/// the original prediction; mean and std are taken over the `k` rates.
/// `subset` overrides the model's own evaluable set (for comparable
/// subsets); it must only contain evaluable ids.
pub fn compute_attentiveness(
    model_id: &str,
    ds: &Dataset,
    originals: &PredictionTable,
    cfs: &CounterfactualSet,
    cf_preds: &PredictionTable,
    subset: Option<&[String]>,
) -> Result<AttentivenessReport> {
    let default = ds.task.default_label.as_str();
    let k = cfs.k;
    let evaluable = select_evaluable(ds, originals)?;
    let ids: Vec<String> = match subset {
        None => evaluable,
        Some(s) => {
            let ok: HashSet<&str> = evaluable.iter().map(String::as_str).collect();
            if let Some(bad) = s.iter().find(|id| !ok.contains(id.as_str())) {
                return Err(CatError::Data(format!(
                    "{model_id}: subset id {bad:?} is not evaluable for this model"
                )));
            }
            s.to_vec()
        }
    };
    let mut unparseable = ds
        .instances()
        .iter()
        .filter(|i| originals.get(&i.id) == Some(&Prediction::Unparseable))
        .count();

    let mut report = AttentivenessReport {
        model_id: model_id.to_string(),
        n_dev: ds.len(),
        n_non_default: ids.len(),
        k,
        per_sample_rates: Vec::new(),
        attentiveness_mean: None,
        attentiveness_std: None,
        strict_mean: None,
        unparseable_count: unparseable,
        significant: true,
        null_reason: None,
    };
    if ids.is_empty() {
        report.null_reason = Some(
            if subset.is_some() { EMPTY_COMPARABLE } else { NO_NON_DEFAULT }.to_string(),
        );
        return Ok(report);
    }

    let mut cells: HashMap<(&str, usize), &str> = HashMap::with_capacity(cfs.len());
    for cf in &cfs.instances {
        cells.insert((cf.original_id.as_str(), cf.sample_index), cf.cf_id.as_str());
    }
    let mut flips = vec![0usize; k];
    let mut strict = vec![0usize; k];
    for id in &ids {
        let orig = lookup(originals, id, "original predictions")?;
        for j in 0..k {
            let cf_id = cells.get(&(id.as_str(), j)).ok_or_else(|| {
                CatError::Data(format!("no counterfactual {j} for {id:?} in the set"))
            })?;
            let pred = lookup(cf_preds, cf_id, "counterfactual predictions")?;
            match pred {
                // Unparseable counts as unchanged.
                Prediction::Unparseable => unparseable += 1,
                Prediction::Label(l) => {
                    if pred != orig {
                        flips[j] += 1;
                    }
                    if l == default {
                        strict[j] += 1;
                    }
                }
            }
        }
    }
    let n = ids.len() as f64;
    let rates: Vec<f64> = flips.iter().map(|&f| f as f64 / n).collect();
    let strict_rates: Vec<f64> = strict.iter().map(|&s| s as f64 / n).collect();
    let (mean, std) = mean_std(&rates);
    report.attentiveness_mean = Some(mean * 100.0);
    report.attentiveness_std = Some(std * 100.0);
    report.strict_mean = Some(mean_std(&strict_rates).0 * 100.0);
    report.per_sample_rates = rates;
    report.unparseable_count = unparseable;
    Ok(report)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Number of dev instances predicted correctly; unparseable is wrong.
pub fn count_correct(preds: &PredictionTable, ds: &Dataset) -> Result<usize> {
    let mut correct = 0;
    for inst in ds.instances() {
        if lookup(preds, &inst.id, "accuracy")?.is(&inst.gold_label) {
            correct += 1;
        }
    }
    if preds.len() != ds.len() {
        let ids: HashSet<&str> = ds.instances().iter().map(|i| i.id.as_str()).collect();
        let mut extra: Vec<&String> = preds.keys().filter(|k| !ids.contains(k.as_str())).collect();
        extra.sort();
        return Err(CatError::Data(format!(
            "predictions for ids not in the dataset: {:?}",
            extra.first()
        )));
    }
    Ok(correct)
}

pub fn compute_accuracy(preds: &PredictionTable, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(CatError::Data("accuracy of an empty dataset".into()));
    }
    Ok(percent(count_correct(preds, ds)?, ds.len()))
}

/// Partial-input accuracy minus the majority baseline, in points.
pub fn compute_partial_correlation(
    model_id: &str,
    partial_preds: &PredictionTable,
    ds: &Dataset,
) -> Result<CorrelationReport> {
    let (_, majority_count) = ds.majority_label()?;
    let partial_accuracy = compute_accuracy(partial_preds, ds)?;
    let majority = percent(majority_count, ds.len());
    Ok(CorrelationReport {
        model_id: model_id.to_string(),
        partial_accuracy,
        majority,
        partial_input_correlation: partial_accuracy - majority,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetMode {
    /// Every model predicted some non-default label.
    #[default]
    AllNonDefault,
    /// Every model predicted the same non-default label.
    IdenticalPredictions,
}

/// Dev ids shared by all models' evaluable sets, in dataset order.
pub fn comparable_subset(
    per_model: &[(&str, &PredictionTable)],
    ds: &Dataset,
    mode: SubsetMode,
) -> Result<Vec<String>> {
    if per_model.is_empty() {
        return Err(CatError::Data("comparable subset needs at least one model".into()));
    }
    let default = ds.task.default_label.as_str();
    let mut out = Vec::new();
    for inst in ds.instances() {
        let mut first: Option<&str> = None;
        let mut keep = true;
        for (model, table) in per_model {
            let pred = lookup(table, &inst.id, model)?;
            match pred.label() {
                Some(l) if l != default => {
                    if mode == SubsetMode::IdenticalPredictions && first.is_some_and(|f| f != l) {
                        keep = false;
                    }
                    first.get_or_insert(l);
                }
                _ => keep = false,
            }
        }
        if keep {
            out.push(inst.id.clone());
        }
    }
    Ok(out)
}

/// One-sided exact binomial p-value `P(X >= successes)` for
/// `X ~ Binomial(trials, p)`.
pub fn binomial_upper_tail(successes: u64, trials: u64, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let terms: Vec<f64> = (successes..=trials)
        .map(|x| ln_binomial(trials, x) + x as f64 * lp + (trials - x) as f64 * lq)
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}

/// Whether `correct` out of `n` beats a `majority` accuracy (a fraction) at
/// level `alpha`.
pub fn significance_gate(correct: usize, n: usize, majority: f64, alpha: f64) -> bool {
    n > 0 && binomial_upper_tail(correct as u64, n as u64, majority) < alpha
}

/// Renders a percentage with one decimal, or `-` when absent.
pub fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}
