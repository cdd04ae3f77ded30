//! Black-box prediction dispatch: wire protocol, HTTP client with retries,
//! an append-only cache, and in-process synthetic models.

pub mod cache;
pub mod protocol;
pub mod synthetic;
pub mod transport;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, CacheEntry, PredictionCache};
pub use protocol::{ItemInput, PredictRequest, PredictResponse, RequestParams, WireItem};
pub use synthetic::{SyntheticKind, SyntheticModel, SyntheticModelSpec};
pub use transport::{HttpTransport, RetryPolicy, Transport, TransportError};

use crate::error::{CatError, Result};
use crate::promptkit::{parse_label, PromptTemplate};

/// A model's verdict after mapping onto the task's label set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum Prediction {
    Label(String),
    Unparseable,
}

impl Prediction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Unparseable => None,
        }
    }

    pub fn is(&self, label: &str) -> bool {
        self.label() == Some(label)
    }
}

impl From<Option<String>> for Prediction {
    fn from(v: Option<String>) -> Self {
        v.map_or(Prediction::Unparseable, Prediction::Label)
    }
}

impl From<Prediction> for Option<String> {
    fn from(p: Prediction) -> Self {
        match p {
            Prediction::Label(l) => Some(l),
            Prediction::Unparseable => None,
        }
    }
}

/// One verdict on one original or counterfactual instance.
/// `predicted_label` is `null` in JSON when the output was unparseable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub model_id: String,
    pub instance_ref: String,
    pub predicted_label: Prediction,
    pub raw_output: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    #[default]
    FullInput,
    PartialInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictItem {
    pub id: String,
    pub input: ItemInput,
}

impl PredictItem {
    pub fn pair(id: impl Into<String>, part1: impl Into<String>, part2: impl Into<String>) -> Self {
        PredictItem {
            id: id.into(),
            input: ItemInput::Pair {
                part1: part1.into(),
                part2: part2.into(),
            },
        }
    }

    pub fn prompt(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        PredictItem {
            id: id.into(),
            input: ItemInput::Prompt {
                prompt: prompt.into(),
            },
        }
    }
}

/// How server answers become labels.
#[derive(Debug, Clone)]
pub enum LabelMapping {
    /// The `label` field must be one of these verbatim.
    Direct(Vec<String>),
    /// Free-text generations parsed through the template's verbalizers.
    Template(Box<PromptTemplate>),
}

impl LabelMapping {
    pub fn resolve(&self, label: &str, raw: &str) -> Prediction {
        match self {
            LabelMapping::Direct(set) => {
                if set.iter().any(|l| l == label) {
                    Prediction::Label(label.to_string())
                } else {
                    Prediction::Unparseable
                }
            }
            LabelMapping::Template(tpl) => match parse_label(raw, tpl) {
                Prediction::Unparseable => parse_label(label, tpl),
                p => p,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchSettings {
    pub max_batch_size: usize,
    /// Maximum number of requests in flight at once.
    pub concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for DispatchSettings {
    fn default() -> Self {
        DispatchSettings {
            max_batch_size: 32,
            concurrency: 8,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct ModelEndpoint {
    pub model_id: String,
    pub role: Role,
    pub params: RequestParams,
    pub settings: DispatchSettings,
    transport: Arc<dyn Transport>,
}

impl std::fmt::Debug for ModelEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelEndpoint")
            .field("model_id", &self.model_id)
            .field("role", &self.role)
            .field("params", &self.params)
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl ModelEndpoint {
    pub fn new(
        model_id: impl Into<String>,
        role: Role,
        params: RequestParams,
        settings: DispatchSettings,
        transport: Arc<dyn Transport>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if model_id.is_empty() {
            return Err(CatError::Config("model_id must not be empty".into()));
        }
        if settings.max_batch_size == 0 || settings.concurrency == 0 {
            return Err(CatError::Config(format!(
                "{model_id}: batch size and concurrency must be at least 1"
            )));
        }
        Ok(ModelEndpoint {
            model_id,
            role,
            params,
            settings,
            transport,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Transport gave up (after retries) or the server refused the request.
    Transport,
    /// The server rejected this item with a 422 item error.
    Rejected,
    /// Response ids did not line up with the request.
    Mismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemFailure {
    pub id: String,
    pub kind: FailureKind,
    pub message: String,
}

pub type ItemOutcome = std::result::Result<PredictionRecord, ItemFailure>;

#[derive(Debug, Clone)]
pub struct PredictOutput {
    /// One outcome per input item, in input order.
    pub outcomes: Vec<ItemOutcome>,
    pub requests: usize,
    pub items_sent: usize,
}

impl PredictOutput {
    pub fn failures(&self) -> impl Iterator<Item = &ItemFailure> {
        self.outcomes.iter().filter_map(|o| o.as_ref().err())
    }

    pub fn records(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.outcomes.iter().filter_map(|o| o.as_ref().ok())
    }
}

/// Predicts every item, consulting the cache first. Failures are reported
/// per item and never abort the rest of the batch.
pub fn predict_batch(
    endpoint: &ModelEndpoint,
    items: &[PredictItem],
    cache: &PredictionCache,
    labels: &LabelMapping,
) -> Result<PredictOutput> {
    if items.is_empty() {
        return Err(CatError::Data("predict_batch called with no items".into()));
    }
    let mut ids = HashSet::with_capacity(items.len());
    for it in items {
        if !ids.insert(it.id.as_str()) {
            return Err(CatError::Data(format!("duplicate item id {:?} in batch", it.id)));
        }
    }

    let keys: Vec<String> = items
        .iter()
        .map(|it| cache_key(&endpoint.model_id, &it.input, &endpoint.params))
        .collect();
    let mut outcomes: Vec<Option<ItemOutcome>> = vec![None; items.len()];
    let mut misses = Vec::new();
    for (i, key) in keys.iter().enumerate() {
        match cache.get(key) {
            Some(e) => {
                outcomes[i] = Some(Ok(PredictionRecord {
                    model_id: endpoint.model_id.clone(),
                    instance_ref: items[i].id.clone(),
                    predicted_label: labels.resolve(&e.label, &e.raw),
                    raw_output: e.raw,
                    cached: true,
                }))
            }
            None => misses.push(i),
        }
    }

    let batches: Vec<&[usize]> = misses.chunks(endpoint.settings.max_batch_size).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, ItemOutcome)>> = Mutex::new(Vec::with_capacity(misses.len()));
    let cache_err: Mutex<Option<CatError>> = Mutex::new(None);
    let workers = endpoint.settings.concurrency.min(batches.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let b = next.fetch_add(1, Ordering::SeqCst);
                let Some(batch) = batches.get(b) else { break };
                let (done, fresh) = run_batch(endpoint, items, batch, labels, &keys);
                if let Err(e) = cache.put_all(fresh) {
                    cache_err.lock().expect("lock").get_or_insert(e);
                }
                results.lock().expect("lock").extend(done);
            });
        }
    });
    if let Some(e) = cache_err.into_inner().expect("lock") {
        return Err(e);
    }
    for (i, outcome) in results.into_inner().expect("lock") {
        outcomes[i] = Some(outcome);
    }
    Ok(PredictOutput {
        outcomes: outcomes
            .into_iter()
            .map(|o| o.expect("every item resolved"))
            .collect(),
        requests: batches.len(),
        items_sent: misses.len(),
    })
}

fn run_batch(
    endpoint: &ModelEndpoint,
    items: &[PredictItem],
    batch: &[usize],
    labels: &LabelMapping,
    keys: &[String],
) -> (Vec<(usize, ItemOutcome)>, Vec<CacheEntry>) {
    let req = PredictRequest {
        model: endpoint.model_id.clone(),
        params: endpoint.params,
        items: batch
            .iter()
            .map(|&i| WireItem {
                id: items[i].id.clone(),
                input: items[i].input.clone(),
            })
            .collect(),
    };
    let fail_all = |kind: FailureKind, message: String| -> Vec<(usize, ItemOutcome)> {
        batch
            .iter()
            .map(|&i| {
                (
                    i,
                    Err(ItemFailure {
                        id: items[i].id.clone(),
                        kind,
                        message: message.clone(),
                    }),
                )
            })
            .collect()
    };

    let (answered, rejected) = match endpoint.settings.retry.run(|| endpoint.transport.send(&req)) {
        Ok(resp) => {
            let aligned = resp.predictions.len() == batch.len()
                && resp
                    .predictions
                    .iter()
                    .zip(batch)
                    .all(|(p, &i)| p.id == items[i].id);
            if !aligned {
                return (
                    fail_all(
                        FailureKind::Mismatch,
                        format!(
                            "{}: response ids do not match the request ({} sent, {} returned)",
                            endpoint.model_id,
                            batch.len(),
                            resp.predictions.len()
                        ),
                    ),
                    Vec::new(),
                );
            }
            (resp.predictions, Vec::new())
        }
        Err(TransportError::ItemErrors(failure)) => (failure.predictions, failure.errors),
        Err(e) => {
            return (
                fail_all(FailureKind::Transport, format!("{}: {e}", endpoint.model_id)),
                Vec::new(),
            )
        }
    };

    let mut by_id: HashMap<&str, &protocol::WirePrediction> =
        answered.iter().map(|p| (p.id.as_str(), p)).collect();
    let errors: HashMap<&str, &str> = rejected
        .iter()
        .map(|e| (e.id.as_str(), e.error.as_str()))
        .collect();
    let mut done = Vec::with_capacity(batch.len());
    let mut fresh = Vec::new();
    for &i in batch {
        let id = items[i].id.as_str();
        let outcome = if let Some(msg) = errors.get(id) {
            Err(ItemFailure {
                id: id.to_string(),
                kind: FailureKind::Rejected,
                message: (*msg).to_string(),
            })
        } else if let Some(p) = by_id.remove(id) {
            let raw = if p.raw.is_empty() { p.label.clone() } else { p.raw.clone() };
            fresh.push(CacheEntry {
                key: keys[i].clone(),
                model_id: endpoint.model_id.clone(),
                label: p.label.clone(),
                raw: raw.clone(),
            });
            Ok(PredictionRecord {
                model_id: endpoint.model_id.clone(),
                instance_ref: id.to_string(),
                predicted_label: labels.resolve(&p.label, &raw),
                raw_output: raw,
                cached: false,
            })
        } else {
            Err(ItemFailure {
                id: id.to_string(),
                kind: FailureKind::Mismatch,
                message: "item missing from partial-failure response".into(),
            })
        };
        done.push((i, outcome));
    }
    (done, fresh)
}

pub fn write_records<W: Write>(records: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_records(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(records, &mut buf).map_err(|e| CatError::io(path, e))?;
    fs::write(path, buf).map_err(|e| CatError::io(path, e))
}

pub fn load_records(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CatError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Instance id to prediction.
pub type PredictionTable = HashMap<String, Prediction>;

/// Builds a table, rejecting an id that appears twice.
pub fn table_from_records<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
) -> Result<PredictionTable> {
    let mut table = PredictionTable::new();
    for r in records {
        if table
            .insert(r.instance_ref.clone(), r.predicted_label.clone())
            .is_some()
        {
            return Err(CatError::Data(format!(
                "duplicate prediction for {:?} from {}",
                r.instance_ref, r.model_id
            )));
        }
    }
    Ok(table)
}
