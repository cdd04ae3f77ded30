//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};

use cat_core::cfgen::{sample_counterfactuals, CounterfactualSet, SamplerConfig};
use cat_core::dataspec::{generate_augmented, Dataset, PairedInstance, Part, Split, TaskConfig, AUGMENT_SUFFIX};
use cat_core::metrics::{compute_attentiveness, compute_partial_correlation};
use cat_core::modelio::{load_records, save_records, table_from_records, Prediction, PredictionCache, PredictionRecord, PredictionTable};
use cat_core::pipeline::{Pipeline, RunConfig, RunSummary};
use cat_core::promptkit::{build_prompt, parse_label, sample_demo_tuples, PromptTemplate, BUILTIN_TEMPLATES};
use cat_core::report::ReportRow;
use common::{toy, MockServer};

const ORACLE_N: usize = 1_000;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(10);
const MIXTURE_N: usize = 5_000;
const MIXTURE_TOLERANCE: f64 = 3.0;
const FLIP_SEEDS: u64 = 100;
const SAMPLER_CASES: u32 = 1_000;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_config(dir: &Path, dev: &Dataset, body: &str) -> RunSummary {
    dev.save_jsonl(&dir.join("dev.jsonl")).unwrap();
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    let pipe = Pipeline::load(RunConfig::from_file(&path).unwrap()).unwrap();
    let cache = PredictionCache::open(&pipe.config.cache_path()).unwrap();
    pipe.end_to_end(&cache).unwrap()
}

fn row<'a>(rows: &'a [ReportRow], model: &str) -> &'a ReportRow {
    rows.iter().find(|r| r.model_id == model).unwrap()
}

fn oracle_bracket() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let dev = toy("mnli", ORACLE_N);
    let body = r#"
task = "mnli"
out = "out"
cache = "cache.jsonl"
[data]
dev = "dev.jsonl"
[sampler]
k = 5
seed = 1
[[endpoints]]
model_id = "oracle"
synthetic = { kind = "attentive-oracle" }
[[endpoints]]
model_id = "memorizer"
memorize_from = "dev"
synthetic = { kind = "partial-memorizer" }
"#;
    let start = Instant::now();
    let summary = run_config(dir.path(), &dev, body);
    let elapsed = start.elapsed();
    let o = row(&summary.rows, "oracle").attentiveness_cell();
    let m = row(&summary.rows, "memorizer").attentiveness_cell();
    check(
        o == "100.0 ± 0.0" && m == "0.0 ± 0.0" && elapsed < ORACLE_TIME_LIMIT,
        format!("n={ORACLE_N}: oracle {o}, memorizer {m}, {:.2}s (limit {}s)", elapsed.as_secs_f64(), ORACLE_TIME_LIMIT.as_secs()),
    )
}

fn mixture_calibration() -> Outcome {
    let dev = toy("mnli", MIXTURE_N);
    let mut parts = Vec::new();
    let mut ok = true;
    for p in [0.25, 0.5, 0.75] {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            r#"
task = "mnli"
out = "out"
cache = "cache.jsonl"
[data]
dev = "dev.jsonl"
[sampler]
k = 5
seed = 2
[[endpoints]]
model_id = "mix"
memorize_from = "dev"
synthetic = {{ kind = "mixture", p_attentive = {p}, seed = 9 }}
"#
        );
        let summary = run_config(dir.path(), &dev, &body);
        let mean = row(&summary.rows, "mix").attentiveness.attentiveness_mean.unwrap();
        ok &= (mean - 100.0 * p).abs() <= MIXTURE_TOLERANCE;
        parts.push(format!("p={p}: {mean:.2}"));
    }
    check(ok, format!("n={MIXTURE_N}, tolerance ±{MIXTURE_TOLERANCE}: {}", parts.join(", ")))
}

/// Brute force over every (instance, sample) cell, sharing nothing with
/// the metric code beyond the input tables.
fn brute_force(ds: &Dataset, cfs: &CounterfactualSet, orig: &PredictionTable, cf: &PredictionTable) -> Option<(Vec<usize>, Vec<usize>, usize)> {
    let default = ds.task.default_label.as_str();
    let label = |p: &Prediction| match p {
        Prediction::Label(l) => Some(l.clone()),
        Prediction::Unparseable => None,
    };
    let evaluable: Vec<&PairedInstance> = ds
        .instances()
        .iter()
        .filter(|i| label(&orig[&i.id]).is_some_and(|l| l != default))
        .collect();
    if evaluable.is_empty() {
        return None;
    }
    let mut flips = vec![0; cfs.k];
    let mut strict = vec![0; cfs.k];
    for inst in &evaluable {
        let o = label(&orig[&inst.id]);
        for c in cfs.instances.iter().filter(|c| c.original_id == inst.id) {
            let p = label(&cf[&c.cf_id]);
            if p.is_some() && p != o {
                flips[c.sample_index] += 1;
            }
            if p.as_deref() == Some(default) {
                strict[c.sample_index] += 1;
            }
        }
    }
    Some((flips, strict, evaluable.len()))
}

fn flip_rate_equivalence() -> Outcome {
    let task = TaskConfig::preset("mnli").unwrap();
    let mut cells = 0;
    for seed in 0..FLIP_SEEDS {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=3);
        let n = rng.random_range(k + 1..=10);
        let instances = (0..n)
            .map(|i| PairedInstance {
                id: format!("s{seed}-{i}"),
                part1: format!("p{}", rng.random_range(0..4)),
                part2: format!("h{i}"),
                gold_label: task.label_set[rng.random_range(0..3)].clone(),
                answers: vec![],
            })
            .collect();
        let ds = Dataset::new(task.clone(), Split::Dev, instances, "").unwrap();
        let cfs = sample_counterfactuals(&ds, &SamplerConfig::new(k, seed, Part::Part1)).unwrap();
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            if rng.random_bool(0.1) {
                Prediction::Unparseable
            } else {
                Prediction::Label(task.label_set[rng.random_range(0..3)].clone())
            }
        };
        let orig: PredictionTable = ds.instances().iter().map(|i| (i.id.clone(), draw(&mut rng))).collect();
        let cf: PredictionTable = cfs.instances.iter().map(|c| (c.cf_id.clone(), draw(&mut rng))).collect();
        cells += cfs.len();

        let got = compute_attentiveness("m", &ds, &orig, &cfs, &cf, None).unwrap();
        match brute_force(&ds, &cfs, &orig, &cf) {
            None => {
                if got.attentiveness_mean.is_some() || got.n_non_default != 0 {
                    return Err(format!("seed {seed}: expected null report"));
                }
            }
            Some((flips, strict, m)) => {
                let rates: Vec<f64> = flips.iter().map(|&f| f as f64 / m as f64).collect();
                let mean = 100.0 * flips.iter().sum::<usize>() as f64 / (m * k) as f64;
                let var = rates.iter().map(|r| (100.0 * r - mean).powi(2)).sum::<f64>() / k as f64;
                let strict_mean = 100.0 * strict.iter().sum::<usize>() as f64 / (m * k) as f64;
                let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() < 1e-9);
                if got.n_non_default != m
                    || got.per_sample_rates != rates
                    || !close(got.attentiveness_mean, mean)
                    || !close(got.attentiveness_std, var.sqrt())
                    || !close(got.strict_mean, strict_mean)
                {
                    return Err(format!("seed {seed}: {got:?} vs flips {flips:?} strict {strict:?} of {m}"));
                }
            }
        }
    }
    Ok(format!("{FLIP_SEEDS} random datasets (n<=10, k<=3), {cells} cells enumerated, all equal"))
}

fn augmentation_arithmetic() -> Outcome {
    let train = toy("mnli", 300);
    let aug = generate_augmented(&train, 4).map_err(|e| e.to_string())?;
    let growth = (aug.len() as f64 / train.len() as f64 - 1.0) * 100.0;
    let originals = train.index_by_id();
    let added: Vec<&PairedInstance> = aug.instances().iter().filter(|i| i.id.ends_with(AUGMENT_SUFFIX)).collect();
    let default = &train.task.default_label;
    let kept = train.task.perturbed_part.other();
    let faithful = added.iter().all(|a| {
        let orig = originals[a.id.trim_end_matches(AUGMENT_SUFFIX)];
        &a.gold_label == default && &orig.gold_label != default && a.part(kept) == orig.part(kept)
    });
    let prefix_intact = aug.instances()[..train.len()] == train.instances()[..];
    check(
        aug.len() == 500 && added.len() == 200 && faithful && prefix_intact,
        format!("300 -> {} (+{growth:.1}%), {} added, default label and unperturbed part preserved: {}", aug.len(), added.len(), faithful && prefix_intact),
    )
}

fn sampler_properties() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: SAMPLER_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (1usize..=5).prop_flat_map(|k| {
        (
            prop::collection::vec(("[ab]{0,2}", "[xy]{0,2}", 0usize..3), k + 1..25),
            Just(k),
            any::<u64>(),
        )
    })
    .prop_flat_map(|(rows, k, seed)| {
        let n = rows.len();
        (Just(rows), Just(k), Just(seed), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    });
    let task = TaskConfig::preset("mnli").unwrap();
    let build = |rows: &[(String, String, usize)], order: &[usize]| {
        let v = order
            .iter()
            .map(|&i| PairedInstance {
                id: format!("r{i}"),
                part1: rows[i].0.clone(),
                part2: rows[i].1.clone(),
                gold_label: task.label_set[rows[i].2].clone(),
                answers: vec![],
            })
            .collect();
        Dataset::new(task.clone(), Split::Dev, v, "").unwrap()
    };
    let result = runner.run(&strategy, |(rows, k, seed, perm)| {
        let identity: Vec<usize> = (0..rows.len()).collect();
        let ds = build(&rows, &identity);
        let cfg = SamplerConfig::new(k, seed, Part::Part1);
        let a = sample_counterfactuals(&ds, &cfg).unwrap();
        for chunk in a.instances.chunks(k) {
            let donors: std::collections::HashSet<&str> = chunk.iter().map(|c| c.donor_id.as_str()).collect();
            prop_assert_eq!(donors.len(), k, "k distinct donors");
            prop_assert!(!donors.contains(chunk[0].original_id.as_str()), "donor is the original");
        }
        let again = sample_counterfactuals(&ds, &cfg).unwrap();
        prop_assert_eq!(a.to_jsonl_bytes(), again.to_jsonl_bytes());
        let shuffled = sample_counterfactuals(&build(&rows, &perm), &cfg).unwrap();
        let key = |s: &CounterfactualSet| {
            let mut v: Vec<_> = s.instances.iter().map(|c| (c.cf_id.clone(), c.donor_id.clone(), c.part1.clone(), c.part2.clone())).collect();
            v.sort();
            v
        };
        if key(&a) != key(&shuffled) {
            return Err(TestCaseError::fail("permutation changed the draw"));
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok(format!("{SAMPLER_CASES} generated cases: donor != original, k distinct donors, permutation invariance, double-run bytes")),
        Err(e) => Err(e.to_string()),
    }
}

fn correlation_identity() -> Outcome {
    // Constant-majority partial endpoint through the whole pipeline.
    let dir = tempfile::tempdir().unwrap();
    let dev = toy("mnli", 300);
    let body = r#"
task = "mnli"
out = "out"
cache = "cache.jsonl"
[data]
dev = "dev.jsonl"
[[endpoints]]
model_id = "oracle"
synthetic = { kind = "attentive-oracle" }
[[endpoints]]
model_id = "constant"
role = "partial-input"
synthetic = { kind = "constant", label = "entailment" }
"#;
    let summary = run_config(dir.path(), &dev, body);
    let constant = summary.rows[0].correlation.as_ref().unwrap().partial_input_correlation;

    // Hand-built prediction file: 617/1000 correct, majority class 354/1000.
    let t = TaskConfig::preset("mnli").unwrap();
    let counts = [("entailment", 354), ("neutral", 323), ("contradiction", 323)];
    let mut v = Vec::new();
    for (label, c) in counts {
        for j in 0..c {
            v.push(PairedInstance {
                id: format!("{label}-{j}"),
                part1: String::new(),
                part2: format!("{label} {j}"),
                gold_label: label.into(),
                answers: vec![],
            });
        }
    }
    let ds = Dataset::new(t, Split::Dev, v, "").unwrap();
    let records: Vec<PredictionRecord> = ds
        .instances()
        .iter()
        .enumerate()
        .map(|(i, inst)| PredictionRecord {
            model_id: "hyp".into(),
            instance_ref: inst.id.clone(),
            predicted_label: if i < 617 { Prediction::Label(inst.gold_label.clone()) } else { Prediction::Unparseable },
            raw_output: String::new(),
            cached: false,
        })
        .collect();
    let file = dir.path().join("preds.hyp.jsonl");
    save_records(&file, &records).unwrap();
    let table = table_from_records(&load_records(&file).unwrap()).unwrap();
    let c = compute_partial_correlation("hyp", &table, &ds).unwrap();
    let shown = format!("{:.1}", c.partial_input_correlation);
    check(
        constant == 0.0 && shown == "26.3" && (c.partial_input_correlation - 26.3).abs() < 1e-9,
        format!(
            "constant-majority = {constant:?}; {:.1} - {:.1} = {shown}",
            c.partial_accuracy, c.majority
        ),
    )
}

fn prompt_counting() -> Outcome {
    let mut seen = Vec::new();
    let mut ok = true;
    for (task, tpl_name, per) in [("mnli", "mnli-instruct", 3), ("rte", "rte-instruct", 2)] {
        let t = TaskConfig::preset(task).unwrap();
        let tpl = PromptTemplate::builtin(tpl_name, &t).unwrap();
        let train = toy(task, 30);
        let mut counts = Vec::new();
        for n in 0..=3 {
            let demos = sample_demo_tuples(&train, n, 5).unwrap();
            let members: usize = demos.iter().map(|d| d.members.len()).sum();
            let prompt = build_prompt(&tpl, &demos, "query premise", "query hypothesis");
            // Every demo ends in a filled answer line; the query's is empty.
            let rendered = prompt.matches(&tpl.answer_prefix).count();
            ok &= members == rendered && members == per * n;
            counts.push(members);
        }
        seen.push(format!("{task} {counts:?}"));
    }
    let mut round_trips = 0;
    for name in BUILTIN_TEMPLATES {
        for task in ["mnli", "rte", "qqp", "paws"] {
            let t = TaskConfig::preset(task).unwrap();
            let Ok(tpl) = PromptTemplate::builtin(name, &t) else { continue };
            for label in &t.label_set {
                ok &= parse_label(tpl.verbalize(label), &tpl) == Prediction::Label(label.clone());
                round_trips += 1;
            }
        }
    }
    check(ok, format!("{}; {round_trips} verbalizers round-trip through parse_label", seen.join(", ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let dev = toy("mnli", 200);
    let known: HashMap<(String, String), String> = dev
        .instances()
        .iter()
        .map(|i| ((i.part1.clone(), i.part2.clone()), i.gold_label.clone()))
        .collect();
    let server = MockServer::labelling(move |a, b| {
        known.get(&(a.to_string(), b.to_string())).cloned().unwrap_or_else(|| "neutral".into())
    });
    let body = |out: &str| {
        format!(
            r#"
task = "mnli"
out = "{out}"
cache = "cache.jsonl"
subset_mode = "all-non-default"
[data]
dev = "dev.jsonl"
[sampler]
k = 5
seed = 42
[[endpoints]]
model_id = "remote"
http = {{ url = "{}" }}
[[endpoints]]
model_id = "mix"
memorize_from = "dev"
synthetic = {{ kind = "mixture", p_attentive = 0.6, seed = 1 }}
[[endpoints]]
model_id = "hyp"
role = "partial-input"
memorize_from = "dev"
synthetic = {{ kind = "partial-memorizer" }}
"#,
            server.url
        )
    };
    let first = run_config(dir.path(), &dev, &body("run1"));
    let calls = server.calls();
    let second = run_config(dir.path(), &dev, &body("run2"));
    let files = |s: &RunSummary| [&s.paths.json, &s.paths.markdown, &s.paths.scatter].map(|p| fs::read(p).unwrap());
    let same = files(&first) == files(&second);
    check(
        same && second.stats.requests == 0 && server.calls() == calls,
        format!(
            "report.json, report.md, scatter.csv identical: {same}; warm run sent {} request(s)",
            second.stats.requests
        ),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("oracle bracket", oracle_bracket),
        ("mixture calibration", mixture_calibration),
        ("flip-rate oracle equivalence", flip_rate_equivalence),
        ("augmentation arithmetic", augmentation_arithmetic),
        ("sampler properties", sampler_properties),
        ("correlation identity", correlation_identity),
        ("prompt counting", prompt_counting),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(msg) => println!("[PASS] {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
