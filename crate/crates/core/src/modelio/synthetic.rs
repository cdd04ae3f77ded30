//! In-process reference models with known attentiveness, used to validate
//! the metrics and to exercise the pipeline without a server.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::protocol::{
    ItemInput, PartialFailure, PredictRequest, PredictResponse, WireItemError, WirePrediction,
};
use super::transport::{Transport, TransportError};
use crate::dataspec::{Dataset, Part, TaskConfig};
use crate::digest::FieldHasher;
use crate::error::{CatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Gold label on pairs seen in the reference data, default otherwise.
    AttentiveOracle,
    /// Looks only at the unperturbed part and replays the label memorized
    /// for it from a training split.
    PartialMemorizer,
    Constant { label: String },
    /// Non-default iff token Jaccard overlap of the parts reaches `threshold`.
    LexicalOverlap { threshold: f64 },
    /// Attentive with probability `p_attentive` per input, memorizer otherwise.
    Mixture { p_attentive: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticModelSpec {
    pub fn validate(&self, task: &TaskConfig) -> Result<()> {
        match &self.kind {
            SyntheticKind::Mixture { p_attentive: p } if !(0.0..=1.0).contains(p) => Err(
                CatError::Config(format!("mixture probability {p} outside [0, 1]")),
            ),
            SyntheticKind::LexicalOverlap { threshold: t } if !(0.0..=1.0).contains(t) => Err(
                CatError::Config(format!("overlap threshold {t} outside [0, 1]")),
            ),
            SyntheticKind::Constant { label } if !task.has_label(label) => Err(CatError::Config(
                format!("constant label {label:?} is not a label of {}", task.task_id),
            )),
            _ => Ok(()),
        }
    }
}

/// A synthetic model bound to a task and its lookup tables.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticModelSpec,
    task: TaskConfig,
    known_pairs: HashMap<(String, String), String>,
    memorized: HashMap<String, String>,
    kept: Part,
}

impl SyntheticModel {
    /// `known` supplies the original pairs the oracle recognises;
    /// `memorize_from` is the split the memorizer learns its table from.
    pub fn build(
        spec: SyntheticModelSpec,
        task: &TaskConfig,
        known: &[&Dataset],
        memorize_from: Option<&Dataset>,
    ) -> Result<SyntheticModel> {
        spec.validate(task)?;
        let needs_pairs = matches!(
            spec.kind,
            SyntheticKind::AttentiveOracle | SyntheticKind::Mixture { .. }
        );
        let needs_table = matches!(
            spec.kind,
            SyntheticKind::PartialMemorizer | SyntheticKind::Mixture { .. }
        );
        let kept = task.perturbed_part.other();

        let mut known_pairs = HashMap::new();
        if needs_pairs {
            for ds in known {
                for inst in ds.instances() {
                    known_pairs
                        .entry((inst.part1.clone(), inst.part2.clone()))
                        .or_insert_with(|| inst.gold_label.clone());
                }
            }
        }

        let mut memorized = HashMap::new();
        if needs_table {
            let train = memorize_from.ok_or_else(|| {
                CatError::Config("memorizing synthetic model needs a training split".into())
            })?;
            let mut counts: HashMap<&str, Vec<usize>> = HashMap::new();
            for inst in train.instances() {
                let slot = counts
                    .entry(inst.part(kept))
                    .or_insert_with(|| vec![0; task.label_set.len()]);
                if let Some(li) = task.label_index(&inst.gold_label) {
                    slot[li] += 1;
                }
            }
            for (text, c) in counts {
                // Most frequent label, ties to the earliest in label_set.
                let best = c
                    .iter()
                    .enumerate()
                    .fold(0, |b, (i, &n)| if n > c[b] { i } else { b });
                memorized.insert(text.to_string(), task.label_set[best].clone());
            }
        }

        Ok(SyntheticModel {
            spec,
            task: task.clone(),
            known_pairs,
            memorized,
            kept,
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    pub fn predict(&self, part1: &str, part2: &str) -> String {
        match &self.spec.kind {
            SyntheticKind::AttentiveOracle => self.oracle(part1, part2),
            SyntheticKind::PartialMemorizer => self.memorizer(part1, part2),
            SyntheticKind::Constant { label } => label.clone(),
            SyntheticKind::LexicalOverlap { threshold } => {
                if token_overlap(part1, part2) >= *threshold {
                    self.task.first_non_default().to_string()
                } else {
                    self.task.default_label.clone()
                }
            }
            SyntheticKind::Mixture { p_attentive } => {
                let mut h = FieldHasher::new("mixture");
                h.u64(self.spec.seed).str(part1).str(part2);
                if h.unit_interval() < *p_attentive {
                    self.oracle(part1, part2)
                } else {
                    self.memorizer(part1, part2)
                }
            }
        }
    }

    fn oracle(&self, part1: &str, part2: &str) -> String {
        self.known_pairs
            .get(&(part1.to_string(), part2.to_string()))
            .cloned()
            .unwrap_or_else(|| self.task.default_label.clone())
    }

    fn memorizer(&self, part1: &str, part2: &str) -> String {
        let key = match self.kept {
            Part::Part1 => part1,
            Part::Part2 => part2,
        };
        self.memorized
            .get(key)
            .cloned()
            .unwrap_or_else(|| self.task.default_label.clone())
    }
}

/// Jaccard overlap of lower-cased whitespace tokens; 0 when both are empty.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let ta: HashSet<String> = a.split_whitespace().map(str::to_lowercase).collect();
    let tb: HashSet<String> = b.split_whitespace().map(str::to_lowercase).collect();
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

impl Transport for SyntheticModel {
    fn send(&self, req: &PredictRequest) -> std::result::Result<PredictResponse, TransportError> {
        let mut predictions = Vec::with_capacity(req.items.len());
        let mut errors = Vec::new();
        for item in &req.items {
            match &item.input {
                ItemInput::Pair { part1, part2 } => {
                    let label = self.predict(part1, part2);
                    predictions.push(WirePrediction {
                        id: item.id.clone(),
                        raw: label.clone(),
                        label,
                    });
                }
                ItemInput::Prompt { .. } => errors.push(WireItemError {
                    id: item.id.clone(),
                    error: "synthetic models only accept direct pairs".into(),
                }),
            }
        }
        if errors.is_empty() {
            Ok(PredictResponse { predictions })
        } else {
            Err(TransportError::ItemErrors(PartialFailure {
                errors,
                predictions,
            }))
        }
    }
}
