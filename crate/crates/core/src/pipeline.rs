//! Run configuration and stage orchestration.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::cfgen::{sample_counterfactuals, CounterfactualSet, SamplerConfig, DEFAULT_K};
use crate::dataspec::{
    build_partial_view, load_dataset_with, DataFormat, Dataset, LoadOptions, Part, Split,
    TaskConfig,
};
use crate::error::{CatError, Result};
use crate::metrics::{compute_partial_correlation, select_evaluable, SubsetMode, DEFAULT_ALPHA};
use crate::modelio::{
    load_records, predict_batch, save_records, table_from_records, DispatchSettings,
    HttpTransport, LabelMapping, ModelEndpoint, PredictItem, PredictionCache, PredictionRecord,
    RequestParams, Role, SyntheticModel, SyntheticModelSpec, Transport,
};
use crate::promptkit::{build_prompt, sample_demo_tuples, DemoTuple, PromptTemplate};
use crate::report::{score_models, write_reports, ReportPaths, ReportRow};

pub const CF_FILE: &str = "cf.jsonl";
pub const CACHE_FILE: &str = "predictions.jsonl";
pub const CACHE_DIR_ENV: &str = "CAT_CACHE_DIR";

pub fn preds_file(model_id: &str) -> String {
    format!("preds.{model_id}.jsonl")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name or path to a task file.
    pub task: String,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub endpoints: Vec<EndpointConfig>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub concurrency: Option<usize>,
    pub max_batch_size: Option<usize>,
    #[serde(default)]
    pub predict_all_cf: bool,
    pub subset_mode: Option<SubsetMode>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dev: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub subsample: Option<usize>,
    #[serde(default)]
    pub subsample_seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { k: DEFAULT_K, seed: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub model_id: String,
    #[serde(default)]
    pub role: Role,
    pub http: Option<HttpConfig>,
    pub synthetic: Option<SyntheticModelSpec>,
    /// Split a memorizing synthetic model learns from; defaults to train.
    pub memorize_from: Option<Split>,
    /// Present for in-context prompting, absent for direct pairs.
    pub icl: Option<IclConfig>,
    /// Part shown to a partial-input endpoint.
    pub keep: Option<Part>,
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub url: String,
    /// Environment variable holding a bearer token.
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IclConfig {
    pub template: String,
    #[serde(default = "default_tuples")]
    pub n_tuples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tuples() -> usize {
    3
}

impl RunConfig {
    /// Parses a TOML run file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| CatError::Config(format!("reading {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.data.dev, &mut cfg.data.train, &mut cfg.out, &mut cfg.cache]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        if Path::new(&cfg.task).extension().is_some() {
            cfg.task = base.join(&cfg.task).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Explicit path, else `$CAT_CACHE_DIR/predictions.jsonl`, else a file
    /// in the output directory.
    pub fn cache_path(&self) -> PathBuf {
        if let Some(p) = &self.cache {
            return p.clone();
        }
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(CACHE_FILE),
            _ => self.out_dir().join("cache").join(CACHE_FILE),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(DEFAULT_ALPHA)
    }

    fn dispatch(&self) -> DispatchSettings {
        let mut s = DispatchSettings::default();
        if let Some(c) = self.concurrency {
            s.concurrency = c;
        }
        if let Some(b) = self.max_batch_size {
            s.max_batch_size = b;
        }
        s
    }

    /// Checks everything that can be checked without reading datasets.
    pub fn validate(&self) -> Result<TaskConfig> {
        let task = TaskConfig::resolve(&self.task)?;
        let dev = self
            .data
            .dev
            .as_ref()
            .ok_or_else(|| CatError::Config("run config has no data.dev path".into()))?;
        for p in std::iter::once(dev).chain(self.data.train.as_ref()) {
            if !p.is_file() {
                return Err(CatError::Config(format!("data file {} does not exist", p.display())));
            }
        }
        if self.sampler.k == 0 {
            return Err(CatError::Config("sampler.k must be at least 1".into()));
        }
        if self.concurrency == Some(0) || self.max_batch_size == Some(0) {
            return Err(CatError::Config("concurrency and max_batch_size must be at least 1".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(CatError::Config(format!("alpha {a} is not in (0, 1)")));
            }
        }
        let mut seen = HashSet::new();
        let mut partial = 0;
        for ep in &self.endpoints {
            let id = &ep.model_id;
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
                return Err(CatError::Config(format!(
                    "model_id {id:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(CatError::Config(format!("duplicate model_id {id:?}")));
            }
            match (&ep.http, &ep.synthetic) {
                (Some(_), None) => {}
                (None, Some(spec)) => {
                    spec.validate(&task)?;
                    if ep.icl.is_some() {
                        return Err(CatError::Config(format!(
                            "{id}: synthetic endpoints only take direct pairs"
                        )));
                    }
                }
                _ => {
                    return Err(CatError::Config(format!(
                        "{id}: set exactly one of [http] or [synthetic]"
                    )))
                }
            }
            if let Some(icl) = &ep.icl {
                PromptTemplate::resolve(&icl.template, &task)?;
                if icl.n_tuples > 0 && self.data.train.is_none() {
                    return Err(CatError::Config(format!(
                        "{id}: in-context demonstrations need data.train"
                    )));
                }
            }
            if ep.role == Role::PartialInput {
                partial += 1;
            } else if ep.keep.is_some() {
                return Err(CatError::Config(format!("{id}: `keep` only applies to partial-input endpoints")));
            }
        }
        if partial > 1 {
            return Err(CatError::Config("at most one partial-input endpoint per run".into()));
        }
        Ok(task)
    }
}

/// Template plus the demonstrations prepended to every query.
type Prompting = (PromptTemplate, Vec<DemoTuple>);

/// A validated run with its datasets loaded.
#[derive(Debug)]
pub struct Pipeline {
    pub config: RunConfig,
    pub task: TaskConfig,
    pub dev: Dataset,
    pub train: Option<Dataset>,
}

/// Counters for one predict stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictStats {
    pub items: usize,
    pub requests: usize,
    pub items_sent: usize,
}

impl PredictStats {
    fn add(&mut self, items: usize, out: &crate::modelio::PredictOutput) {
        self.items += items;
        self.requests += out.requests;
        self.items_sent += out.items_sent;
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub paths: ReportPaths,
    pub rows: Vec<ReportRow>,
    pub stats: PredictStats,
}

impl Pipeline {
    pub fn load(config: RunConfig) -> Result<Pipeline> {
        let task = config.validate().map_err(|e| e.in_stage("validate"))?;
        let load = |path: &Path, split: Split, sub: bool| -> Result<Dataset> {
            let format = config.data.format.unwrap_or_else(|| DataFormat::from_path(path));
            let opts = LoadOptions {
                subsample: config.data.subsample.filter(|_| sub).map(|n| (n, config.data.subsample_seed)),
            };
            load_dataset_with(path, format, &task, split, &opts)
        };
        let dev_path = config.data.dev.clone().expect("validated");
        let dev = load(&dev_path, Split::Dev, true).map_err(|e| e.in_stage("load"))?;
        let train = match &config.data.train {
            Some(p) => Some(load(p, Split::Train, false).map_err(|e| e.in_stage("load"))?),
            None => None,
        };
        Ok(Pipeline { config, task, dev, train })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.config.out_dir()
    }

    /// Samples counterfactuals and writes `cf.jsonl`.
    pub fn gen_cf(&self) -> Result<CounterfactualSet> {
        let cfg = SamplerConfig::new(self.config.sampler.k, self.config.sampler.seed, self.task.perturbed_part);
        let cfs = sample_counterfactuals(&self.dev, &cfg).map_err(|e| e.in_stage("gen-cf"))?;
        let out = self.out_dir();
        fs::create_dir_all(&out).map_err(|e| CatError::io(&out, e))?;
        cfs.save_jsonl(&out.join(CF_FILE)).map_err(|e| e.in_stage("gen-cf"))?;
        Ok(cfs)
    }

    fn partial_view(&self, ep: &EndpointConfig) -> Dataset {
        build_partial_view(&self.dev, ep.keep.unwrap_or(self.task.perturbed_part.other()))
    }

    fn build_endpoint(&self, ep: &EndpointConfig) -> Result<(ModelEndpoint, LabelMapping, Option<Prompting>)> {
        let transport: Arc<dyn Transport> = match (&ep.http, &ep.synthetic) {
            (Some(h), _) => {
                let token = match &h.token_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        CatError::Config(format!("{}: environment variable {var} is not set", ep.model_id))
                    })?),
                    None => None,
                };
                Arc::new(
                    HttpTransport::new(&h.url, Duration::from_secs(h.timeout_secs), token)
                        .map_err(|e| CatError::Transport(e.to_string()))?,
                )
            }
            (None, Some(spec)) => {
                let memorize = match ep.memorize_from.unwrap_or(Split::Train) {
                    Split::Dev => Some(&self.dev),
                    _ => self.train.as_ref(),
                };
                let known: Vec<&Dataset> = std::iter::once(&self.dev).chain(self.train.as_ref()).collect();
                Arc::new(SyntheticModel::build(spec.clone(), &self.task, &known, memorize)?)
            }
            (None, None) => {
                return Err(CatError::Config(format!("{}: no [http] or [synthetic] section", ep.model_id)))
            }
        };
        let mut params = RequestParams::default();
        if let Some(n) = ep.max_new_tokens {
            params.max_new_tokens = n;
        }
        let endpoint = ModelEndpoint::new(&ep.model_id, ep.role, params, self.config.dispatch(), transport)?;
        match &ep.icl {
            None => Ok((endpoint, LabelMapping::Direct(self.task.label_set.clone()), None)),
            Some(icl) => {
                let tpl = PromptTemplate::resolve(&icl.template, &self.task)?;
                let demos = match &self.train {
                    Some(t) if icl.n_tuples > 0 => sample_demo_tuples(t, icl.n_tuples, icl.seed)?,
                    _ => Vec::new(),
                };
                Ok((endpoint, LabelMapping::Template(Box::new(tpl.clone())), Some((tpl, demos))))
            }
        }
    }

    /// Predicts every endpoint and writes `preds.<model>.jsonl`. Full-input
    /// endpoints see the originals, then the counterfactuals of their
    /// evaluable originals (or all of them with `predict_all_cf`).
    pub fn predict(&self, cfs: &CounterfactualSet, cache: &PredictionCache) -> Result<PredictStats> {
        let mut stats = PredictStats::default();
        for ep in &self.config.endpoints {
            self.predict_one(ep, cfs, cache, &mut stats)
                .map_err(|e| with_model(&ep.model_id, e).in_stage("predict"))?;
        }
        Ok(stats)
    }

    fn predict_one(
        &self,
        ep: &EndpointConfig,
        cfs: &CounterfactualSet,
        cache: &PredictionCache,
        stats: &mut PredictStats,
    ) -> Result<()> {
        let (endpoint, labels, icl) = self.build_endpoint(ep)?;
        let item = |id: &str, p1: &str, p2: &str| match &icl {
            None => PredictItem::pair(id, p1, p2),
            Some((tpl, demos)) => PredictItem::prompt(id, build_prompt(tpl, demos, p1, p2)),
        };
        let run = |items: Vec<PredictItem>, stats: &mut PredictStats| -> Result<Vec<PredictionRecord>> {
            if items.is_empty() {
                return Ok(Vec::new());
            }
            let out = predict_batch(&endpoint, &items, cache, &labels)?;
            stats.add(items.len(), &out);
            if let Some(f) = out.failures().next() {
                let n = out.failures().count();
                let prefix = format!("{}: ", ep.model_id);
                let msg = f.message.strip_prefix(&prefix).unwrap_or(&f.message);
                return Err(CatError::Transport(format!("{n} item(s) failed, first {:?}: {msg}", f.id)));
            }
            Ok(out.records().cloned().collect())
        };

        let mut records;
        if ep.role == Role::PartialInput {
            let view = self.partial_view(ep);
            records = run(view.instances().iter().map(|i| item(&i.id, &i.part1, &i.part2)).collect(), stats)?;
        } else {
            records = run(self.dev.instances().iter().map(|i| item(&i.id, &i.part1, &i.part2)).collect(), stats)?;
            let wanted: Option<HashSet<String>> = if self.config.predict_all_cf {
                None
            } else {
                let table = table_from_records(&records)?;
                Some(select_evaluable(&self.dev, &table)?.into_iter().collect())
            };
            let cf_items = cfs
                .instances
                .iter()
                .filter(|c| wanted.as_ref().is_none_or(|w| w.contains(&c.original_id)))
                .map(|c| item(&c.cf_id, &c.part1, &c.part2))
                .collect();
            records.extend(run(cf_items, stats)?);
        }
        save_records(&self.out_dir().join(preds_file(&ep.model_id)), &records)
    }

    /// Scores the prediction files in the output directory and writes the
    /// report artifacts.
    pub fn score(&self) -> Result<Vec<ReportRow>> {
        let out = self.out_dir();
        let stage = |e: CatError| e.in_stage("score");
        let cfs = CounterfactualSet::load_jsonl(&out.join(CF_FILE), &self.dev).map_err(stage)?;
        let mut full = Vec::new();
        let mut correlation = None;
        for ep in &self.config.endpoints {
            let records = load_records(&out.join(preds_file(&ep.model_id))).map_err(stage)?;
            let table = table_from_records(&records).map_err(stage)?;
            match ep.role {
                Role::FullInput => full.push((ep.model_id.clone(), table)),
                Role::PartialInput => {
                    let view = self.partial_view(ep);
                    correlation = Some(compute_partial_correlation(&ep.model_id, &table, &view).map_err(stage)?);
                }
            }
        }
        let rows = score_models(&self.dev, &cfs, &full, correlation.as_ref(), self.config.subset_mode, self.config.alpha())
            .map_err(stage)?;
        write_reports(&out, &rows).map_err(|e| e.in_stage("report"))?;
        Ok(rows)
    }

    /// load, gen-cf, predict, score, report.
    pub fn end_to_end(&self, cache: &PredictionCache) -> Result<RunSummary> {
        let cfs = self.gen_cf()?;
        let stats = self.predict(&cfs, cache)?;
        let rows = self.score()?;
        let out = self.out_dir();
        Ok(RunSummary {
            paths: ReportPaths {
                json: out.join(crate::report::REPORT_JSON),
                markdown: out.join(crate::report::REPORT_MD),
                scatter: out.join(crate::report::SCATTER_CSV),
            },
            rows,
            stats,
        })
    }
}

/// Prefixes transport and config messages with the endpoint they came from.
fn with_model(model: &str, e: CatError) -> CatError {
    match e {
        CatError::Transport(m) => CatError::Transport(format!("{model}: {m}")),
        CatError::Config(m) => CatError::Config(format!("{model}: {m}")),
        other => other,
    }
}
