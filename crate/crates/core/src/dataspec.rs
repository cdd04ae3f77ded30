//! Task configuration, dataset ingestion and derived dataset views.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfgen;
use crate::digest::{sha256_hex, FieldHasher};
use crate::error::{CatError, Result};

/// Which half of a paired input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Part1,
    Part2,
}

impl Part {
    pub fn other(self) -> Part {
        match self {
            Part::Part1 => Part::Part2,
            Part::Part2 => Part::Part1,
        }
    }
}

impl FromStr for Part {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "part1" | "1" => Ok(Part::Part1),
            "part2" | "2" => Ok(Part::Part2),
            other => Err(CatError::Config(format!(
                "unknown part {other:?} (expected part1 or part2)"
            ))),
        }
    }
}

/// How a part's payload is interpreted downstream. Asset references are
/// opaque strings (paths or URIs) handed to the model untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartKind {
    #[default]
    Text,
    AssetRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(CatError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Tsv,
}

impl DataFormat {
    /// Picks the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => DataFormat::Tsv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl FromStr for DataFormat {
    type Err = CatError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(DataFormat::Jsonl),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(CatError::Config(format!("unknown data format {other:?}"))),
        }
    }
}

/// Label universe and part layout for one task/dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_id: String,
    pub label_set: Vec<String>,
    /// The label a randomly composed pair is expected to carry.
    pub default_label: String,
    pub part1_name: String,
    pub part2_name: String,
    pub perturbed_part: Part,
    #[serde(default)]
    pub part1_kind: PartKind,
    #[serde(default)]
    pub part2_kind: PartKind,
}

const NLI3: [&str; 3] = ["entailment", "neutral", "contradiction"];
const NLI2: [&str; 2] = ["entailment", "non-entailment"];
const PARAPHRASE: [&str; 2] = ["paraphrase", "non-paraphrase"];
const ANSWERABLE: [&str; 2] = ["has-answer", "no-answer"];
const TRUTH: [&str; 2] = ["true", "false"];

pub const PRESET_NAMES: [&str; 10] = [
    "mnli", "wanli", "rte", "qqp", "paws", "squad2", "duorc", "newsqa", "vqa2", "nlvr2",
];

impl TaskConfig {
    /// Built-in configurations for the supported benchmark datasets.
    pub fn preset(name: &str) -> Option<TaskConfig> {
        let (labels, default, p1, p2, k1): (&[&str], &str, &str, &str, PartKind) = match name {
            "mnli" | "wanli" => (&NLI3, "neutral", "premise", "hypothesis", PartKind::Text),
            "rte" => (&NLI2, "non-entailment", "text", "hypothesis", PartKind::Text),
            "qqp" => (&PARAPHRASE, "non-paraphrase", "question1", "question2", PartKind::Text),
            "paws" => (&PARAPHRASE, "non-paraphrase", "sentence1", "sentence2", PartKind::Text),
            "squad2" | "duorc" | "newsqa" => {
                (&ANSWERABLE, "no-answer", "paragraph", "question", PartKind::Text)
            }
            "vqa2" => (&ANSWERABLE, "no-answer", "image", "question", PartKind::AssetRef),
            "nlvr2" => (&TRUTH, "false", "image", "text", PartKind::AssetRef),
            _ => return None,
        };
        Some(TaskConfig {
            task_id: name.to_string(),
            label_set: labels.iter().map(|s| s.to_string()).collect(),
            default_label: default.to_string(),
            part1_name: p1.to_string(),
            part2_name: p2.to_string(),
            perturbed_part: Part::Part1,
            part1_kind: k1,
            part2_kind: PartKind::Text,
        })
    }

    /// Resolves either a preset name or a TOML/JSON task file.
    pub fn resolve(name_or_path: &str) -> Result<TaskConfig> {
        if let Some(t) = TaskConfig::preset(name_or_path) {
            return Ok(t);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(CatError::Config(format!(
                "task {name_or_path:?} is neither a preset ({}) nor an existing file",
                PRESET_NAMES.join(", ")
            )));
        }
        TaskConfig::from_file(path)
    }

    pub fn from_file(path: &Path) -> Result<TaskConfig> {
        let text = fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
        let task: TaskConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text)
                .map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text)
                .map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_set.len() < 2 {
            return Err(CatError::InvalidTask(format!(
                "{}: label_set needs at least two labels",
                self.task_id
            )));
        }
        let mut seen = HashSet::new();
        for l in &self.label_set {
            if !seen.insert(l.as_str()) {
                return Err(CatError::InvalidTask(format!(
                    "{}: duplicate label {l:?}",
                    self.task_id
                )));
            }
        }
        if !self.has_label(&self.default_label) {
            return Err(CatError::InvalidTask(format!(
                "{}: default label {:?} not in label_set",
                self.task_id, self.default_label
            )));
        }
        if self.part1_name == self.part2_name {
            return Err(CatError::InvalidTask(format!(
                "{}: part names must differ",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.label_set.iter().any(|l| l == label)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn part_name(&self, part: Part) -> &str {
        match part {
            Part::Part1 => &self.part1_name,
            Part::Part2 => &self.part2_name,
        }
    }

    /// The first label in `label_set` order that is not the default.
    pub fn first_non_default(&self) -> &str {
        self.label_set
            .iter()
            .find(|l| **l != self.default_label)
            .expect("validated task has a non-default label")
    }
}

/// One example `(part1, part2)` with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedInstance {
    pub id: String,
    pub part1: String,
    pub part2: String,
    #[serde(rename = "label")]
    pub gold_label: String,
    /// Gold answer spans for reading-comprehension tasks; empty elsewhere.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
}

impl PairedInstance {
    pub fn part(&self, part: Part) -> &str {
        match part {
            Part::Part1 => &self.part1,
            Part::Part2 => &self.part2,
        }
    }

    pub fn part_mut(&mut self, part: Part) -> &mut String {
        match part {
            Part::Part1 => &mut self.part1,
            Part::Part2 => &mut self.part2,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Keep `n` instances chosen with the given seed (used for datasets
    /// without a dev split, where a slice of train stands in).
    pub subsample: Option<(usize, u64)>,
}

/// An immutable, validated list of instances from one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskConfig,
    pub split: Split,
    instances: Vec<PairedInstance>,
    /// SHA-256 of the source bytes, or of the derivation for built views.
    pub provenance: String,
}

impl Dataset {
    /// Validates and wraps in-memory instances.
    pub fn new(
        task: TaskConfig,
        split: Split,
        instances: Vec<PairedInstance>,
        provenance: impl Into<String>,
    ) -> Result<Dataset> {
        task.validate()?;
        let mut ids: HashMap<&str, usize> = HashMap::with_capacity(instances.len());
        for (pos, inst) in instances.iter().enumerate() {
            if !task.has_label(&inst.gold_label) {
                return Err(CatError::Data(format!(
                    "instance {:?}: unknown label {:?}",
                    inst.id, inst.gold_label
                )));
            }
            if let Some(first) = ids.insert(inst.id.as_str(), pos) {
                return Err(CatError::Data(format!(
                    "duplicate id {:?} at positions {first} and {pos}",
                    inst.id
                )));
            }
        }
        Ok(Dataset {
            task,
            split,
            instances,
            provenance: provenance.into(),
        })
    }

    pub fn instances(&self) -> &[PairedInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PairedInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn index_by_id(&self) -> HashMap<&str, &PairedInstance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }

    /// Order-independent digest of the instance contents. Two datasets with
    /// the same records in different orders share a digest.
    pub fn content_digest(&self) -> String {
        let mut record_hashes: Vec<[u8; 32]> = self
            .instances
            .iter()
            .map(|i| {
                let mut h = FieldHasher::new("record");
                h.str(&i.id).str(&i.part1).str(&i.part2).str(&i.gold_label);
                for a in &i.answers {
                    h.str(a);
                }
                h.finish()
            })
            .collect();
        record_hashes.sort_unstable();
        let mut h = FieldHasher::new("dataset");
        h.str(&self.task.task_id);
        for r in &record_hashes {
            h.bytes(r);
        }
        h.finish_hex()
    }

    /// Label counts in `label_set` order.
    pub fn label_counts(&self) -> Vec<(String, usize)> {
        let mut counts = vec![0usize; self.task.label_set.len()];
        for inst in &self.instances {
            if let Some(i) = self.task.label_index(&inst.gold_label) {
                counts[i] += 1;
            }
        }
        self.task.label_set.iter().cloned().zip(counts).collect()
    }

    /// The most frequent gold label and its count; ties go to the label
    /// listed first in `label_set`.
    pub fn majority_label(&self) -> Result<(String, usize)> {
        if self.is_empty() {
            return Err(CatError::Data("majority of an empty dataset".into()));
        }
        let mut best: Option<(String, usize)> = None;
        for (label, count) in self.label_counts() {
            if best.as_ref().is_none_or(|(_, c)| count > *c) {
                best = Some((label, count));
            }
        }
        Ok(best.expect("non-empty label set"))
    }

    /// Writes the dataset in the JSONL interchange format.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for inst in &self.instances {
            serde_json::to_writer(&mut out, inst)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).map_err(|e| CatError::io(path, e))?;
        fs::write(path, buf).map_err(|e| CatError::io(path, e))
    }

    fn derived(&self, instances: Vec<PairedInstance>, what: &str, seed: Option<u64>) -> Dataset {
        let mut h = FieldHasher::new("derived");
        h.str(&self.provenance).str(what);
        if let Some(s) = seed {
            h.u64(s);
        }
        Dataset {
            task: self.task.clone(),
            split: self.split,
            instances,
            provenance: h.finish_hex(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    part1: String,
    part2: String,
    label: String,
    #[serde(default)]
    answers: Vec<String>,
}

const TSV_HEADER: [&str; 4] = ["id", "part1", "part2", "label"];

/// Reads and validates a dataset file.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    task: &TaskConfig,
    split: Split,
) -> Result<Dataset> {
    load_dataset_with(path, format, task, split, &LoadOptions::default())
}

pub fn load_dataset_with(
    path: &Path,
    format: DataFormat,
    task: &TaskConfig,
    split: Split,
    opts: &LoadOptions,
) -> Result<Dataset> {
    task.validate()?;
    let bytes = fs::read(path).map_err(|e| CatError::io(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CatError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: format!("not valid UTF-8: {e}"),
    })?;
    let records = match format {
        DataFormat::Jsonl => parse_jsonl(path, text)?,
        DataFormat::Tsv => parse_tsv(path, text)?,
    };

    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut instances = Vec::with_capacity(records.len());
    for (line, rec) in records {
        if !task.has_label(&rec.label) {
            return Err(CatError::UnknownLabel {
                path: path.to_path_buf(),
                line,
                label: rec.label,
                expected: task.label_set.clone(),
            });
        }
        if let Some(&first_line) = first_seen.get(&rec.id) {
            return Err(CatError::DuplicateId {
                path: path.to_path_buf(),
                line,
                first_line,
                id: rec.id,
            });
        }
        first_seen.insert(rec.id.clone(), line);
        instances.push(PairedInstance {
            id: rec.id,
            part1: rec.part1,
            part2: rec.part2,
            gold_label: rec.label,
            answers: rec.answers,
        });
    }

    let mut ds = Dataset {
        task: task.clone(),
        split,
        instances,
        provenance: sha256_hex(&bytes),
    };
    if let Some((n, seed)) = opts.subsample {
        ds = subsample(&ds, n, seed)?;
    }
    Ok(ds)
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<(usize, RawRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| CatError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn parse_tsv(path: &Path, text: &str) -> Result<Vec<(usize, RawRecord)>> {
    let parse_err = |line: usize, message: String| CatError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != TSV_HEADER {
        return Err(parse_err(
            1,
            format!("header must be {:?}, got {:?}", TSV_HEADER, header),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 columns, got {}", row.len())));
        }
        out.push((
            line,
            RawRecord {
                id: row[0].to_string(),
                part1: row[1].to_string(),
                part2: row[2].to_string(),
                label: row[3].to_string(),
                answers: Vec::new(),
            },
        ));
    }
    Ok(out)
}

/// Seeded subset of `n` instances, kept in source order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(CatError::TooSmall(format!(
            "cannot subsample {n} from {} instances",
            ds.len()
        )));
    }
    let mut h = FieldHasher::new("subsample");
    h.u64(seed).str(&ds.content_digest());
    let mut rng = h.into_rng();
    let mut picked = index::sample(&mut rng, ds.len(), n).into_vec();
    picked.sort_unstable();
    let instances = picked.into_iter().map(|i| ds.instances[i].clone()).collect();
    Ok(ds.derived(instances, &format!("subsample:{n}"), Some(seed)))
}

/// Accuracy of always predicting the most frequent gold label.
pub fn majority_baseline(ds: &Dataset) -> Result<f64> {
    let (_, count) = ds.majority_label()?;
    Ok(count as f64 / ds.len() as f64)
}

/// Keeps only `kept` in every instance; the other part becomes the empty
/// string. Everything else is kept as is.
pub fn build_partial_view(ds: &Dataset, kept: Part) -> Dataset {
    let dropped = kept.other();
    let instances = ds
        .instances
        .iter()
        .map(|inst| {
            let mut v = inst.clone();
            v.part_mut(dropped).clear();
            v
        })
        .collect();
    let tag = match kept {
        Part::Part1 => "partial:part1",
        Part::Part2 => "partial:part2",
    };
    ds.derived(instances, tag, None)
}

/// Question-only view for reading comprehension: every passage (part1) is
/// swapped for a different passage drawn from `corpus`, and answerable
/// instances get their first gold answer inserted at a random token
/// boundary so the label stays valid.
pub fn build_rc_paragraph_view(ds: &Dataset, corpus: &Dataset, seed: u64) -> Result<Dataset> {
    let mut passages: Vec<&str> = corpus.instances.iter().map(|i| i.part1.as_str()).collect();
    passages.sort_unstable();
    passages.dedup();
    if passages.len() < 2 {
        return Err(CatError::TooSmall(format!(
            "corpus has {} distinct passage(s), need at least 2",
            passages.len()
        )));
    }
    let default = &ds.task.default_label;
    let mut out = Vec::with_capacity(ds.len());
    for inst in &ds.instances {
        let answer = if inst.gold_label == *default {
            None
        } else {
            Some(inst.answers.first().ok_or_else(|| {
                CatError::Data(format!(
                    "instance {:?} is answerable but carries no answer span",
                    inst.id
                ))
            })?)
        };

        let mut h = FieldHasher::new("rc-paragraph");
        h.u64(seed).str(&inst.id);
        let mut rng = h.into_rng();
        let own = passages.binary_search(&inst.part1.as_str()).ok();
        let candidates = passages.len() - usize::from(own.is_some());
        let mut pick = rng.random_range(0..candidates);
        if let Some(own) = own {
            if pick >= own {
                pick += 1;
            }
        }
        let donor = passages[pick];

        let passage = match answer {
            None => donor.to_string(),
            Some(ans) => {
                let bounds = token_boundaries(donor);
                let at = bounds[rng.random_range(0..bounds.len())];
                insert_at_boundary(donor, at, ans)
            }
        };
        let mut v = inst.clone();
        v.part1 = passage;
        out.push(v);
    }
    Ok(ds.derived(out, "rc-paragraph", Some(seed)))
}

/// Byte offsets where a new token may be inserted: the start of every
/// whitespace-delimited token, plus the end of the text.
fn token_boundaries(text: &str) -> Vec<usize> {
    let mut bounds = Vec::new();
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        if !c.is_whitespace() && prev_ws {
            bounds.push(i);
        }
        prev_ws = c.is_whitespace();
    }
    bounds.push(text.len());
    bounds
}

fn insert_at_boundary(text: &str, at: usize, token: &str) -> String {
    let mut s = String::with_capacity(text.len() + token.len() + 1);
    if at == text.len() {
        s.push_str(text);
        if !text.is_empty() && !text.ends_with(char::is_whitespace) {
            s.push(' ');
        }
        s.push_str(token);
    } else {
        s.push_str(&text[..at]);
        s.push_str(token);
        s.push(' ');
        s.push_str(&text[at..]);
    }
    s
}

/// Suffix appended to an original id for its augmentation counterfactual.
pub const AUGMENT_SUFFIX: &str = "#aug0";

/// Training set plus one counterfactual per non-default instance, each
/// labelled with the task default.
pub fn generate_augmented(train: &Dataset, seed: u64) -> Result<Dataset> {
    if train.len() < 2 {
        return Err(CatError::TooSmall(format!(
            "augmentation needs at least 2 training instances, got {}",
            train.len()
        )));
    }
    let task = &train.task;
    let digest = train.content_digest();
    let pool = cfgen::DonorPool::new(train);
    let mut added = Vec::new();
    for inst in &train.instances {
        if inst.gold_label == task.default_label {
            continue;
        }
        let donor_id = pool.draw(seed, &digest, &inst.id, 1)?[0];
        let donor = pool.get(donor_id);
        let cf = cfgen::compose(inst, donor, task.perturbed_part, task, 0)?;
        added.push(PairedInstance {
            id: format!("{}{AUGMENT_SUFFIX}", inst.id),
            part1: cf.part1,
            part2: cf.part2,
            gold_label: cf.assigned_label,
            answers: Vec::new(),
        });
    }
    let mut instances = train.instances.clone();
    instances.extend(added);
    // Re-validate: derived ids could collide with ids already in the file.
    let mut out = Dataset::new(task.clone(), train.split, instances, String::new())?;
    out.provenance = train.derived(Vec::new(), "augment", Some(seed)).provenance;
    Ok(out)
}

/// Label histogram helper used by reports and logging.
pub fn label_histogram(ds: &Dataset) -> BTreeMap<String, usize> {
    ds.label_counts().into_iter().collect()
}
