mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use cat_core::dataspec::Dataset;
use cat_core::modelio::PredictionCache;
use cat_core::pipeline::{Pipeline, RunConfig};
use cat_core::CatError;
use common::{toy, MockServer};

fn write_data(dir: &Path, ds: &Dataset, name: &str) {
    ds.save_jsonl(&dir.join(name)).unwrap();
}

fn config(dir: &Path, body: &str) -> RunConfig {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    RunConfig::from_file(&path).unwrap()
}

fn run(cfg: RunConfig) -> cat_core::pipeline::RunSummary {
    let pipe = Pipeline::load(cfg).unwrap();
    let cache = PredictionCache::open(&pipe.config.cache_path()).unwrap();
    pipe.end_to_end(&cache).unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

const SYNTHETIC: &str = r#"
task = "mnli"
out = "out"
cache = "cache/preds.jsonl"

[data]
dev = "dev.jsonl"

[sampler]
k = 3
seed = 11

[[endpoints]]
model_id = "oracle"
synthetic = { kind = "attentive-oracle" }

[[endpoints]]
model_id = "memorizer"
memorize_from = "dev"
synthetic = { kind = "partial-memorizer" }

[[endpoints]]
model_id = "hyp-only"
role = "partial-input"
synthetic = { kind = "constant", label = "entailment" }
"#;

#[test]
fn synthetic_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), &toy("mnli", 90), "dev.jsonl");
    let summary = run(config(dir.path(), SYNTHETIC));

    let rows = &summary.rows;
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].attentiveness_cell(), "100.0 ± 0.0");
    assert_eq!(rows[1].attentiveness_cell(), "0.0 ± 0.0");
    assert_eq!(rows[0].attentiveness.n_non_default, 60);
    let corr = rows[0].correlation.as_ref().unwrap();
    assert_eq!(corr.partial_input_correlation, 0.0);

    let out = dir.path().join("out");
    assert_eq!(read(&out.join("cf.jsonl")).lines().count(), 270);
    // Only evaluable originals get their counterfactuals predicted.
    assert_eq!(read(&out.join("preds.oracle.jsonl")).lines().count(), 90 + 60 * 3);
    assert_eq!(read(&out.join("preds.hyp-only.jsonl")).lines().count(), 90);
    let md = read(&summary.paths.markdown);
    assert!(md.contains("| oracle | mnli/dev | 100.0 | 100.0 ± 0.0 | 100.0 | 0.0 | 60/90 |"), "{md}");
    assert_eq!(read(&summary.paths.scatter).lines().count(), 3);
}

#[test]
fn predict_all_cf_sends_every_counterfactual() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), &toy("mnli", 30), "dev.jsonl");
    let body = SYNTHETIC.replace("task = \"mnli\"", "task = \"mnli\"\npredict_all_cf = true");
    let summary = run(config(dir.path(), &body));
    let out = dir.path().join("out");
    assert_eq!(read(&out.join("preds.oracle.jsonl")).lines().count(), 30 + 90);
    assert_eq!(summary.rows[0].attentiveness_cell(), "100.0 ± 0.0");
}

#[test]
fn missing_dev_path_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "task = \"mnli\"\nout = \"out\"\n");
    let err = Pipeline::load(cfg).unwrap_err();
    assert!(err.is_config(), "{err}");
    assert!(!dir.path().join("out").exists());

    let cfg = config(dir.path(), "task = \"mnli\"\n[data]\ndev = \"nope.jsonl\"\n");
    let err = Pipeline::load(cfg).unwrap_err();
    assert!(err.is_config() && err.to_string().contains("nope.jsonl"), "{err}");
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), &toy("mnli", 10), "dev.jsonl");
    let base = "task = \"mnli\"\n[data]\ndev = \"dev.jsonl\"\n";
    let cases = [
        "[[endpoints]]\nmodel_id = \"a b\"\nsynthetic = { kind = \"attentive-oracle\" }\n",
        "[[endpoints]]\nmodel_id = \"a\"\n",
        "[[endpoints]]\nmodel_id = \"a\"\nsynthetic = { kind = \"constant\", label = \"maybe\" }\n",
        "[[endpoints]]\nmodel_id = \"a\"\nsynthetic = { kind = \"attentive-oracle\" }\nicl = { template = \"mnli-instruct\", n_tuples = 0 }\n",
        "[[endpoints]]\nmodel_id = \"a\"\nhttp = { url = \"http://x\" }\nicl = { template = \"mnli-instruct\" }\n",
        "[[endpoints]]\nmodel_id = \"a\"\nhttp = { url = \"http://x\" }\nicl = { template = \"qqp-instruct\", n_tuples = 0 }\n",
        "[[endpoints]]\nmodel_id = \"a\"\nsynthetic = { kind = \"attentive-oracle\" }\n[[endpoints]]\nmodel_id = \"a\"\nsynthetic = { kind = \"attentive-oracle\" }\n",
    ];
    for extra in cases {
        let cfg = config(dir.path(), &format!("{base}{extra}"));
        let err = Pipeline::load(cfg).err().unwrap_or_else(|| panic!("accepted:\n{extra}"));
        assert!(err.is_config(), "{extra}: {err}");
    }
    let path = dir.path().join("bad.toml");
    fs::write(&path, "task = \"mnli\"\nbogus = 1\n").unwrap();
    assert!(matches!(RunConfig::from_file(&path), Err(CatError::Config(_))));
}

fn http_config(url: &str) -> String {
    format!(
        r#"
task = "mnli"
out = "out"
cache = "cache/preds.jsonl"
concurrency = 3
max_batch_size = 16

[data]
dev = "dev.jsonl"

[sampler]
k = 2
seed = 5

[[endpoints]]
model_id = "remote"
http = {{ url = "{url}" }}

[[endpoints]]
model_id = "remote-hyp"
role = "partial-input"
http = {{ url = "{url}" }}
"#
    )
}

/// Knows the gold label of every dev pair; everything else is neutral.
fn oracle_server(ds: &Dataset) -> MockServer {
    let known: HashMap<(String, String), String> = ds
        .instances()
        .iter()
        .map(|i| ((i.part1.clone(), i.part2.clone()), i.gold_label.clone()))
        .collect();
    MockServer::labelling(move |a, b| {
        known
            .get(&(a.to_string(), b.to_string()))
            .cloned()
            .unwrap_or_else(|| "neutral".into())
    })
}

#[test]
fn warm_cache_rerun_is_silent_and_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy("mnli", 60);
    write_data(dir.path(), &ds, "dev.jsonl");
    let server = oracle_server(&ds);
    let body = http_config(&server.url);

    let first = run(config(dir.path(), &body));
    let cold_calls = server.calls();
    assert!(cold_calls > 0);
    assert!(first.stats.requests > 0);
    let files = |s: &cat_core::pipeline::RunSummary| {
        [&s.paths.json, &s.paths.markdown, &s.paths.scatter].map(|p| fs::read(p).unwrap())
    };
    let before = files(&first);

    let second = run(config(dir.path(), &body));
    assert_eq!(server.calls(), cold_calls);
    assert_eq!(second.stats.requests, 0);
    assert_eq!(files(&second), before);

    // Deleting the output directory changes nothing either.
    fs::remove_dir_all(dir.path().join("out")).unwrap();
    let third = run(config(dir.path(), &body));
    assert_eq!(server.calls(), cold_calls);
    assert_eq!(files(&third), before);
    assert_eq!(third.rows[0].attentiveness_cell(), "100.0 ± 0.0");
}

#[test]
fn transport_failure_is_reported_with_stage() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), &toy("mnli", 10), "dev.jsonl");
    let server = MockServer::start(|_, _| (500, serde_json::json!({})));
    let pipe = Pipeline::load(config(dir.path(), &http_config(&server.url))).unwrap();
    let err = pipe.end_to_end(&PredictionCache::in_memory()).unwrap_err();
    assert!(err.is_transport(), "{err}");
    let msg = err.to_string();
    assert!(msg.starts_with("predict: transport error: remote: 10 item(s) failed"), "{msg}");
    assert_eq!(msg.matches("remote").count(), 1, "{msg}");
    // One batch, three attempts.
    assert_eq!(server.calls(), 3);
}

#[test]
fn icl_endpoint_gets_prompts_with_demonstrations() {
    let dir = tempfile::tempdir().unwrap();
    let dev = toy("mnli", 30);
    write_data(dir.path(), &dev, "dev.jsonl");
    write_data(dir.path(), &toy("mnli", 12), "train.jsonl");
    let known: HashMap<(String, String), String> = dev
        .instances()
        .iter()
        .map(|i| ((i.part1.clone(), i.part2.clone()), i.gold_label.clone()))
        .collect();
    // Reads the query block back out of the prompt and answers in words.
    let server = MockServer::start(move |_, body| {
        let answer = |prompt: &str, _: &str| {
            let query = prompt.rsplit("\n\n").next().unwrap();
            let mut lines = query.lines();
            let p = lines.next().unwrap().trim_start_matches("Premise: ");
            let h = lines.next().unwrap().trim_start_matches("Hypothesis: ");
            let gold = known.get(&(p.to_string(), h.to_string())).map_or("neutral", String::as_str);
            let mut word = gold.to_string();
            word[..1].make_ascii_uppercase();
            format!("{word}.\nBecause reasons")
        };
        (200, common::answer_all(body, &answer))
    });
    let body = format!(
        r#"
task = "mnli"
out = "out"
cache = "cache/preds.jsonl"
[data]
dev = "dev.jsonl"
train = "train.jsonl"
[sampler]
k = 2
[[endpoints]]
model_id = "gpt"
http = {{ url = "{}" }}
icl = {{ template = "mnli-instruct", n_tuples = 2, seed = 3 }}
"#,
        server.url
    );
    let summary = run(config(dir.path(), &body));
    assert_eq!(summary.rows[0].accuracy, 100.0);
    assert_eq!(summary.rows[0].attentiveness_cell(), "100.0 ± 0.0");
    let prompt = server.bodies()[0]["items"][0]["prompt"].as_str().unwrap().to_string();
    assert_eq!(prompt.matches("Answer: ").count(), 6);
    assert!(prompt.ends_with("Answer:"));
}
