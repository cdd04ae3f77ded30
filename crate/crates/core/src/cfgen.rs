//! Counterfactual sampling and composition.
//!
//! A counterfactual keeps one part of an original instance and takes the
//! other part from a donor drawn from the same split. Donors are chosen
//! from an id-sorted pool with a stream keyed by
//! `(seed, dataset digest, instance id, sample index)`, so an instance's
//! donors do not depend on where it sits in the file.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataspec::{Dataset, PairedInstance, Part, TaskConfig};
use crate::digest::{sha256_hex, FieldHasher};
use crate::error::{CatError, Result};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub seed: u64,
    pub perturbed_part: Part,
}

impl SamplerConfig {
    pub fn new(k: usize, seed: u64, perturbed_part: Part) -> Self {
        SamplerConfig {
            k,
            seed,
            perturbed_part,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualInstance {
    pub cf_id: String,
    pub original_id: String,
    pub donor_id: String,
    pub sample_index: usize,
    pub part1: String,
    pub part2: String,
    pub assigned_label: String,
}

impl CounterfactualInstance {
    pub fn part(&self, part: Part) -> &str {
        match part {
            Part::Part1 => &self.part1,
            Part::Part2 => &self.part2,
        }
    }
}

/// `|dataset| × k` counterfactuals, grouped by original in source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterfactualSet {
    pub source_digest: String,
    pub k: usize,
    pub perturbed_part: Part,
    /// `None` when the set was read back from a file.
    pub seed: Option<u64>,
    pub instances: Vec<CounterfactualInstance>,
}

impl CounterfactualSet {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for cf in &self.instances {
            serde_json::to_writer(&mut out, cf)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl_bytes()).map_err(|e| CatError::io(path, e))
    }

    /// SHA-256 of the JSONL serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_jsonl_bytes())
    }

    /// Reads a counterfactual file back and checks it against the dataset
    /// it was generated from.
    pub fn load_jsonl(path: &Path, ds: &Dataset) -> Result<CounterfactualSet> {
        let text = fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
        let mut instances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let cf: CounterfactualInstance =
                serde_json::from_str(line).map_err(|e| CatError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            instances.push(cf);
        }
        let k = instances.iter().map(|c| c.sample_index + 1).max().unwrap_or(0);
        let set = CounterfactualSet {
            source_digest: ds.content_digest(),
            k,
            perturbed_part: ds.task.perturbed_part,
            seed: None,
            instances,
        };
        set.check_against(ds)
            .map_err(|e| CatError::Data(format!("{}: {e}", path.display())))?;
        Ok(set)
    }

    /// Verifies the structural invariants: k distinct donors per original,
    /// no self-donation, swapped parts byte-equal to their sources and the
    /// default label on every entry.
    pub fn check_against(&self, ds: &Dataset) -> Result<()> {
        let by_id = ds.index_by_id();
        let kept = self.perturbed_part.other();
        let mut per_original: std::collections::HashMap<&str, HashSet<&str>> =
            std::collections::HashMap::new();
        let mut seen_cells = HashSet::new();
        for cf in &self.instances {
            let orig = by_id.get(cf.original_id.as_str()).ok_or_else(|| {
                CatError::Data(format!("{}: unknown original {:?}", cf.cf_id, cf.original_id))
            })?;
            let donor = by_id.get(cf.donor_id.as_str()).ok_or_else(|| {
                CatError::Data(format!("{}: unknown donor {:?}", cf.cf_id, cf.donor_id))
            })?;
            if cf.donor_id == cf.original_id {
                return Err(CatError::Data(format!("{}: donor equals original", cf.cf_id)));
            }
            if cf.sample_index >= self.k || !seen_cells.insert((cf.original_id.as_str(), cf.sample_index)) {
                return Err(CatError::Data(format!(
                    "{}: sample index {} repeated or out of range",
                    cf.cf_id, cf.sample_index
                )));
            }
            if cf.part(kept) != orig.part(kept) || cf.part(self.perturbed_part) != donor.part(self.perturbed_part) {
                return Err(CatError::Data(format!(
                    "{}: parts do not match original/donor",
                    cf.cf_id
                )));
            }
            if cf.assigned_label != ds.task.default_label {
                return Err(CatError::Data(format!(
                    "{}: assigned label {:?} is not the default",
                    cf.cf_id, cf.assigned_label
                )));
            }
            if !per_original
                .entry(cf.original_id.as_str())
                .or_default()
                .insert(cf.donor_id.as_str())
            {
                return Err(CatError::Data(format!("{}: repeated donor", cf.cf_id)));
            }
        }
        for inst in ds.instances() {
            let n = per_original.get(inst.id.as_str()).map_or(0, HashSet::len);
            if n != self.k {
                return Err(CatError::Data(format!(
                    "original {:?} has {n} counterfactuals, expected {}",
                    inst.id, self.k
                )));
            }
        }
        Ok(())
    }
}

/// Id-sorted view of a dataset used for donor draws.
pub struct DonorPool<'a> {
    sorted: Vec<&'a PairedInstance>,
}

impl<'a> DonorPool<'a> {
    pub fn new(ds: &'a Dataset) -> Self {
        let mut sorted: Vec<&PairedInstance> = ds.instances().iter().collect();
        sorted.sort_unstable_by(|a, b| a.id.cmp(&b.id));
        DonorPool { sorted }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn get(&self, pos: usize) -> &'a PairedInstance {
        self.sorted[pos]
    }

    /// `k` distinct donor positions for `instance_id`, never the instance
    /// itself. Sample `j` is drawn from a stream keyed by `j`, redrawing on
    /// collisions with itself or earlier samples.
    pub fn draw(&self, seed: u64, digest: &str, instance_id: &str, k: usize) -> Result<Vec<usize>> {
        let own = self
            .sorted
            .binary_search_by(|p| p.id.as_str().cmp(instance_id))
            .ok();
        let available = self.sorted.len() - usize::from(own.is_some());
        if k > available {
            return Err(CatError::TooSmall(format!(
                "need {k} donors for {instance_id:?} but only {available} other instances exist"
            )));
        }
        let mut chosen = Vec::with_capacity(k);
        for j in 0..k {
            let mut h = FieldHasher::new("cf-donor");
            h.u64(seed).str(digest).str(instance_id).u64(j as u64);
            let mut rng = h.into_rng();
            loop {
                let pos = rng.random_range(0..self.sorted.len());
                if Some(pos) != own && !chosen.contains(&pos) {
                    chosen.push(pos);
                    break;
                }
            }
        }
        Ok(chosen)
    }
}

/// Builds one counterfactual: the perturbed part comes from `donor`, the
/// other part from `original`, and the label is the task default.
pub fn compose(
    original: &PairedInstance,
    donor: &PairedInstance,
    part: Part,
    task: &TaskConfig,
    sample_index: usize,
) -> Result<CounterfactualInstance> {
    if original.id == donor.id {
        return Err(CatError::Data(format!(
            "instance {:?} cannot donate to itself",
            original.id
        )));
    }
    let (part1, part2) = match part {
        Part::Part1 => (donor.part1.clone(), original.part2.clone()),
        Part::Part2 => (original.part1.clone(), donor.part2.clone()),
    };
    Ok(CounterfactualInstance {
        cf_id: format!("{}#cf{sample_index}", original.id),
        original_id: original.id.clone(),
        donor_id: donor.id.clone(),
        sample_index,
        part1,
        part2,
        assigned_label: task.default_label.clone(),
    })
}

/// Draws `k` counterfactuals for every instance in `ds`.
pub fn sample_counterfactuals(ds: &Dataset, cfg: &SamplerConfig) -> Result<CounterfactualSet> {
    if cfg.k == 0 {
        return Err(CatError::Config("k must be at least 1".into()));
    }
    if ds.len() <= cfg.k {
        return Err(CatError::TooSmall(format!(
            "{} instances cannot supply {} distinct donors each",
            ds.len(),
            cfg.k
        )));
    }
    let digest = ds.content_digest();
    let pool = DonorPool::new(ds);
    let mut instances = Vec::with_capacity(ds.len() * cfg.k);
    for inst in ds.instances() {
        for (j, pos) in pool.draw(cfg.seed, &digest, &inst.id, cfg.k)?.into_iter().enumerate() {
            instances.push(compose(inst, pool.get(pos), cfg.perturbed_part, &ds.task, j)?);
        }
    }
    Ok(CounterfactualSet {
        source_digest: digest,
        k: cfg.k,
        perturbed_part: cfg.perturbed_part,
        seed: Some(cfg.seed),
        instances,
    })
}

const ANNOTATION_HEADER: [&str; 8] = [
    "cf_id",
    "part1",
    "part2",
    "assigned_label",
    "human_label",
    "original_id",
    "original_part1",
    "original_part2",
];

/// Writes `n` uniformly sampled counterfactuals as an annotation sheet with
/// a blank `human_label` column. The original instance's parts are
/// appended for context.
pub fn export_annotation_sample<W: Write>(
    cfs: &CounterfactualSet,
    originals: &Dataset,
    n: usize,
    seed: u64,
    out: W,
) -> Result<usize> {
    if n > cfs.len() {
        return Err(CatError::TooSmall(format!(
            "asked for {n} annotation rows from {} counterfactuals",
            cfs.len()
        )));
    }
    let by_id = originals.index_by_id();
    let mut h = FieldHasher::new("annotation");
    h.u64(seed).str(&cfs.source_digest);
    let mut rng = h.into_rng();
    let mut picked = index::sample(&mut rng, cfs.len(), n).into_vec();
    picked.sort_unstable();

    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| CatError::Data(format!("writing annotation sheet: {e}"));
    w.write_record(ANNOTATION_HEADER).map_err(csv_err)?;
    for i in picked {
        let cf = &cfs.instances[i];
        let orig = by_id.get(cf.original_id.as_str()).ok_or_else(|| {
            CatError::Data(format!("{}: original {:?} not in dataset", cf.cf_id, cf.original_id))
        })?;
        w.write_record([
            cf.cf_id.as_str(),
            &cf.part1,
            &cf.part2,
            &cf.assigned_label,
            "",
            &cf.original_id,
            &orig.part1,
            &orig.part2,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CatError::Data(format!("writing annotation sheet: {e}")))?;
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnnotationScore {
    pub n: usize,
    pub holds: usize,
    /// Percentage of rows where the default-label assumption holds.
    pub accuracy: f64,
}

/// Scores a filled annotation sheet; `human_label` must be `holds` or
/// `fails` on every row.
pub fn score_annotation<R: Read>(input: R) -> Result<AnnotationScore> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r
        .headers()
        .map_err(|e| CatError::Data(format!("annotation sheet header: {e}")))?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == "human_label")
        .ok_or_else(|| CatError::Data("annotation sheet has no human_label column".into()))?;
    let id_col = headers.iter().position(|h| h == "cf_id");
    let (mut n, mut holds) = (0usize, 0usize);
    for (i, row) in r.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CatError::Data(format!("annotation line {line}: {e}")))?;
        let who = id_col.and_then(|c| row.get(c)).unwrap_or("?");
        match row.get(col).map(str::trim) {
            Some("holds") => holds += 1,
            Some("fails") => {}
            Some("") | None => {
                return Err(CatError::Data(format!(
                    "annotation line {line} ({who}): missing human_label"
                )))
            }
            Some(other) => {
                return Err(CatError::Data(format!(
                    "annotation line {line} ({who}): human_label {other:?} is not holds/fails"
                )))
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(CatError::Data("annotation sheet has no rows".into()));
    }
    Ok(AnnotationScore {
        n,
        holds,
        accuracy: holds as f64 / n as f64 * 100.0,
    })
}

pub fn score_annotation_file(path: &Path) -> Result<AnnotationScore> {
    let f = fs::File::open(path).map_err(|e| CatError::io(path, e))?;
    score_annotation(f).map_err(|e| CatError::Data(format!("{}: {e}", path.display())))
}
