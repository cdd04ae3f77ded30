//! In-context-learning prompts: instruction templates, demonstration
//! tuples and parsing free-text generations back to labels.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataspec::{Dataset, PairedInstance, TaskConfig};
use crate::digest::FieldHasher;
use crate::error::{CatError, Result};
use crate::modelio::Prediction;

pub const BUILTIN_TEMPLATES: [&str; 5] = [
    "rte-instruct",
    "mnli-instruct",
    "qqp-instruct",
    "paws-instruct",
    "t5-plain",
];

const RTE_INSTRUCTION: &str = "You're given a pair of sentences: a Text and a Hypothesis. \
Your job is to determine the relation between them based on your inference from the statement and your commonsense knowledge.\n\
Answer 'Entailment' if the Hypothesis can be inferred from the Text;\n\
Answer 'Not entailment' if the Hypothesis disagrees with the Text.";

const MNLI_INSTRUCTION: &str = "You're given a pair of sentences: a Premise and a Hypothesis. \
Your job is to determine the relation between them based on your inference from the statement and your commonsense knowledge.\n\
Answer 'Entailment' if the Hypothesis can be inferred from the Premise;\n\
Answer 'Contradiction' if the Hypothesis disagrees with the Premise\n\
Answer 'Neutral' if the Hypothesis can neither be inferred from the Premise nor disagrees with the Premise.";

const QQP_INSTRUCTION: &str = "You're given a pair of questions. \
Your job is to determine whether they are semantically equivalent.\n\
Answer 'Paraphrase' if they bear the same meaning;\n\
Answer 'Not paraphrase' if they have different meanings.";

const PAWS_INSTRUCTION: &str = "You're given a pair of sentences. \
Your job is to determine whether they are semantically equivalent.\n\
Answer 'Paraphrase' if they bear the same meaning;\n\
Answer 'Not paraphrase' if they have different meanings.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub instruction: String,
    pub part1_prefix: String,
    pub part2_prefix: String,
    pub answer_prefix: String,
    /// Surface form the model is expected to produce for each label.
    pub label_verbalizers: BTreeMap<String, String>,
    #[serde(default = "default_separator")]
    pub demo_separator: String,
}

fn default_separator() -> String {
    "\n\n".to_string()
}

fn verbalizers(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(l, s)| (l.to_string(), s.to_string()))
        .collect()
}

impl PromptTemplate {
    /// Looks up a shipped template. `t5-plain` is derived from the task
    /// (field names as prefixes, labels as their own verbalizers).
    pub fn builtin(name: &str, task: &TaskConfig) -> Result<PromptTemplate> {
        let nli3 = [
            ("entailment", "Entailment"),
            ("neutral", "Neutral"),
            ("contradiction", "Contradiction"),
        ];
        let paraphrase = [("paraphrase", "Paraphrase"), ("non-paraphrase", "Not paraphrase")];
        let instruct = |instruction: &str, p1: &str, p2: &str, labels: &[(&str, &str)]| PromptTemplate {
            instruction: instruction.to_string(),
            part1_prefix: format!("{p1}: "),
            part2_prefix: format!("{p2}: "),
            answer_prefix: "Answer: ".to_string(),
            label_verbalizers: verbalizers(labels),
            demo_separator: default_separator(),
        };
        let tpl = match name {
            "rte-instruct" => instruct(
                RTE_INSTRUCTION,
                "Text",
                "Hypothesis",
                &[("entailment", "Entailment"), ("non-entailment", "Not entailment")],
            ),
            "mnli-instruct" => instruct(MNLI_INSTRUCTION, "Premise", "Hypothesis", &nli3),
            "qqp-instruct" => instruct(QQP_INSTRUCTION, "Question 1", "Question 2", &paraphrase),
            "paws-instruct" => instruct(PAWS_INSTRUCTION, "Sentence 1", "Sentence 2", &paraphrase),
            "t5-plain" => PromptTemplate {
                instruction: String::new(),
                part1_prefix: format!("{}: ", task.part1_name),
                part2_prefix: format!("{}: ", task.part2_name),
                answer_prefix: "label: ".to_string(),
                label_verbalizers: task.label_set.iter().map(|l| (l.clone(), l.clone())).collect(),
                demo_separator: default_separator(),
            },
            other => {
                return Err(CatError::Config(format!(
                    "unknown template {other:?} (built-ins: {})",
                    BUILTIN_TEMPLATES.join(", ")
                )))
            }
        };
        tpl.validate(task)?;
        Ok(tpl)
    }

    /// Built-in name or path to a JSON template file.
    pub fn resolve(name_or_path: &str, task: &TaskConfig) -> Result<PromptTemplate> {
        if BUILTIN_TEMPLATES.contains(&name_or_path) {
            return PromptTemplate::builtin(name_or_path, task);
        }
        let path = Path::new(name_or_path);
        let text = fs::read_to_string(path).map_err(|e| CatError::io(path, e))?;
        let tpl: PromptTemplate = serde_json::from_str(&text)
            .map_err(|e| CatError::Config(format!("{}: {e}", path.display())))?;
        tpl.validate(task)?;
        Ok(tpl)
    }

    pub fn validate(&self, task: &TaskConfig) -> Result<()> {
        for label in &task.label_set {
            match self.label_verbalizers.get(label) {
                Some(s) if !normalize(s).is_empty() => {}
                _ => {
                    return Err(CatError::Config(format!(
                        "template has no usable verbalizer for label {label:?}"
                    )))
                }
            }
        }
        if let Some(extra) = self.label_verbalizers.keys().find(|k| !task.has_label(k)) {
            return Err(CatError::Config(format!(
                "template verbalizes {extra:?}, which is not a label of {}",
                task.task_id
            )));
        }
        let mut seen = HashSet::new();
        for surface in self.label_verbalizers.values() {
            if !seen.insert(normalize(surface)) {
                return Err(CatError::Config(format!(
                    "verbalizer {surface:?} collides with another after case-folding"
                )));
            }
        }
        Ok(())
    }

    pub fn verbalize<'a>(&'a self, label: &'a str) -> &'a str {
        self.label_verbalizers
            .get(label)
            .map(String::as_str)
            .unwrap_or(label)
    }
}

/// One gold-labelled training example per label, in `label_set` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoTuple {
    pub members: Vec<PairedInstance>,
}

/// Draws `n_tuples` demonstration tuples from `train`. Within a label, the
/// examples used across tuples are distinct.
pub fn sample_demo_tuples(train: &Dataset, n_tuples: usize, seed: u64) -> Result<Vec<DemoTuple>> {
    if n_tuples == 0 {
        return Ok(Vec::new());
    }
    let digest = train.content_digest();
    let mut per_label: Vec<Vec<&PairedInstance>> = Vec::new();
    for label in &train.task.label_set {
        let pool: Vec<&PairedInstance> = train
            .instances()
            .iter()
            .filter(|i| &i.gold_label == label)
            .collect();
        if pool.len() < n_tuples {
            return Err(CatError::TooSmall(format!(
                "label {label:?} has {} training instance(s), need {n_tuples} for demonstrations",
                pool.len()
            )));
        }
        let mut h = FieldHasher::new("demo");
        h.u64(seed).str(&digest).str(label);
        let mut rng = h.into_rng();
        let picks = index::sample(&mut rng, pool.len(), n_tuples);
        per_label.push(picks.iter().map(|i| pool[i]).collect());
    }
    Ok((0..n_tuples)
        .map(|t| DemoTuple {
            members: per_label.iter().map(|picks| picks[t].clone()).collect(),
        })
        .collect())
}

/// Instruction, demonstrations, then the query with an empty answer slot.
pub fn build_prompt(tpl: &PromptTemplate, demos: &[DemoTuple], part1: &str, part2: &str) -> String {
    let mut blocks: Vec<String> = Vec::new();
    if !tpl.instruction.is_empty() {
        blocks.push(tpl.instruction.clone());
    }
    for demo in demos.iter().flat_map(|t| &t.members) {
        blocks.push(format!(
            "{}{}\n{}{}\n{}{}",
            tpl.part1_prefix,
            demo.part1,
            tpl.part2_prefix,
            demo.part2,
            tpl.answer_prefix,
            tpl.verbalize(&demo.gold_label)
        ));
    }
    blocks.push(format!(
        "{}{}\n{}{}\n{}",
        tpl.part1_prefix,
        part1,
        tpl.part2_prefix,
        part2,
        tpl.answer_prefix.trim_end()
    ));
    blocks.join(&tpl.demo_separator)
}

fn normalize(s: &str) -> String {
    let folded = s
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps a generation to a label: exact match on the normalized first line,
/// otherwise a unique prefix match in either direction, otherwise
/// [`Prediction::Unparseable`].
pub fn parse_label(raw: &str, tpl: &PromptTemplate) -> Prediction {
    let first_line = raw.trim_start().lines().next().unwrap_or("");
    let out = normalize(first_line);
    if out.is_empty() {
        return Prediction::Unparseable;
    }
    let surfaces: Vec<(&String, String)> = tpl
        .label_verbalizers
        .iter()
        .map(|(label, s)| (label, normalize(s)))
        .collect();
    if let Some((label, _)) = surfaces.iter().find(|(_, s)| *s == out) {
        return Prediction::Label((*label).clone());
    }
    let matches: Vec<&String> = surfaces
        .iter()
        .filter(|(_, s)| starts_with_word(&out, s) || s.starts_with(&out))
        .map(|(label, _)| *label)
        .collect();
    match matches.as_slice() {
        [only] => Prediction::Label((*only).clone()),
        _ => Prediction::Unparseable,
    }
}

fn starts_with_word(text: &str, word: &str) -> bool {
    text.strip_prefix(word)
        .is_some_and(|rest| rest.chars().next().is_none_or(|c| !c.is_alphanumeric()))
}
