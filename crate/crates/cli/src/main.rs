use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use cat_core::cfgen::{
    export_annotation_sample, sample_counterfactuals, score_annotation_file, CounterfactualSet,
    SamplerConfig, DEFAULT_K,
};
use cat_core::dataspec::{
    build_partial_view, build_rc_paragraph_view, generate_augmented, label_histogram,
    load_dataset, majority_baseline, DataFormat, Dataset, Part, Split, TaskConfig,
};
use cat_core::modelio::PredictionCache;
use cat_core::pipeline::{Pipeline, RunConfig, CF_FILE};
use cat_core::report::render_markdown;
use cat_core::{CatError, Result};

/// Counterfactual attentiveness testing for paired-input classifiers.
#[derive(Parser)]
#[command(name = "cat-eval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset (or a whole run file) and print a summary.
    Validate(DataArgs),
    /// Sample k counterfactuals per dev instance into cf.jsonl.
    GenCf {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a partial-input view into partial.jsonl.
    GenPartial {
        #[command(flatten)]
        data: DataArgs,
        /// Part to keep; defaults to the unperturbed one.
        #[arg(long)]
        keep: Option<Part>,
        /// Reading-comprehension view: swap in a different passage and
        /// re-insert the answer.
        #[arg(long)]
        rc_paragraph: bool,
        /// Passage pool for --rc-paragraph; defaults to the dataset itself.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add one default-labelled counterfactual per non-default training
    /// instance, into augmented.jsonl.
    GenAugment {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export counterfactuals for manual label-flip checking.
    AnnotateSample {
        #[command(flatten)]
        data: DataArgs,
        /// Counterfactual file; defaults to <out>/cf.jsonl.
        #[arg(long)]
        cf: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a filled annotation sheet.
    ScoreAnnotation { file: PathBuf },
    /// Query every endpoint; resumable through the prediction cache.
    Predict(RunArgs),
    /// Score prediction files into report.json, report.md and scatter.csv.
    Score(RunArgs),
    /// Full run from counterfactual sampling to the report files.
    Report(RunArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Run file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task preset name or task file.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<DataFormat>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prediction cache file; falls back to $CAT_CACHE_DIR.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Also predict counterfactuals of non-evaluable originals.
    #[arg(long)]
    predict_all_cf: bool,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(c) = &self.cache {
            cfg.cache = Some(c.clone());
        }
        if let Some(k) = self.k {
            cfg.sampler.k = k;
        }
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
        }
        if let Some(c) = self.concurrency {
            cfg.concurrency = Some(c);
        }
        cfg.predict_all_cf |= self.predict_all_cf;
        Ok(cfg)
    }
}

/// Flag values layered over an optional run file.
struct Resolved {
    task: TaskConfig,
    config: Option<RunConfig>,
    format: Option<DataFormat>,
    data: Option<PathBuf>,
    out: PathBuf,
}

impl DataArgs {
    fn resolve(&self) -> Result<Resolved> {
        let config = self.config.as_deref().map(RunConfig::from_file).transpose()?;
        let task_ref = self
            .task
            .clone()
            .or_else(|| config.as_ref().map(|c| c.task.clone()))
            .ok_or_else(|| CatError::Config("--task is required without --config".into()))?;
        Ok(Resolved {
            task: TaskConfig::resolve(&task_ref)?,
            format: self.format.or(config.as_ref().and_then(|c| c.data.format)),
            data: self.data.clone(),
            out: self
                .out
                .clone()
                .or_else(|| config.as_ref().and_then(|c| c.out.clone()))
                .unwrap_or_else(|| PathBuf::from("out")),
            config,
        })
    }
}

impl Resolved {
    /// `--data`, else the run file's path for `split`.
    fn load(&self, split: Split) -> Result<Dataset> {
        let from_config = self.config.as_ref().and_then(|c| match split {
            Split::Train => c.data.train.clone(),
            _ => c.data.dev.clone(),
        });
        let path = self
            .data
            .clone()
            .or(from_config)
            .ok_or_else(|| CatError::Config(format!("--data is required (no {split} path in config)")))?;
        if !path.is_file() {
            return Err(CatError::Config(format!("data file {} does not exist", path.display())));
        }
        let format = self.format.unwrap_or_else(|| DataFormat::from_path(&path));
        load_dataset(&path, format, &self.task, split)
    }

    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| CatError::io(&self.out, e))?;
        Ok(self.out.join(name))
    }
}

fn summarize(ds: &Dataset) -> Result<()> {
    println!("{} {}: {} instances", ds.task.task_id, ds.split, ds.len());
    for (label, n) in label_histogram(ds) {
        println!("  {label:<16} {n}");
    }
    println!("majority baseline: {:.1}%", majority_baseline(ds)? * 100.0);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate(args) => {
            if let Some(path) = &args.config {
                let cfg = RunConfig::from_file(path)?;
                let pipe = Pipeline::load(cfg)?;
                summarize(&pipe.dev)?;
                if let Some(train) = &pipe.train {
                    summarize(train)?;
                }
                println!("{} endpoint(s) configured", pipe.config.endpoints.len());
            } else {
                summarize(&args.resolve()?.load(Split::Dev)?)?;
            }
        }
        Command::GenCf { data, k, seed } => {
            let r = data.resolve()?;
            let ds = r.load(Split::Dev)?;
            let sampler = r.config.as_ref().map(|c| c.sampler.clone());
            let k = k.or(sampler.as_ref().map(|s| s.k)).unwrap_or(DEFAULT_K);
            let seed = seed.or(sampler.map(|s| s.seed)).unwrap_or(0);
            let cfs = sample_counterfactuals(&ds, &SamplerConfig::new(k, seed, ds.task.perturbed_part))?;
            let path = r.output(CF_FILE)?;
            cfs.save_jsonl(&path)?;
            info!("wrote {} counterfactuals ({} x {k}) to {}", cfs.len(), ds.len(), path.display());
        }
        Command::GenPartial { data, keep, rc_paragraph, corpus, seed } => {
            let r = data.resolve()?;
            let ds = r.load(Split::Dev)?;
            let view = if rc_paragraph {
                let corpus = match corpus {
                    Some(p) => load_dataset(&p, DataFormat::from_path(&p), &r.task, Split::Train)?,
                    None => ds.clone(),
                };
                build_rc_paragraph_view(&ds, &corpus, seed)?
            } else {
                build_partial_view(&ds, keep.unwrap_or(ds.task.perturbed_part.other()))
            };
            let path = r.output("partial.jsonl")?;
            view.save_jsonl(&path)?;
            info!("wrote {} partial-input instances to {}", view.len(), path.display());
        }
        Command::GenAugment { data, seed } => {
            let r = data.resolve()?;
            let train = r.load(Split::Train)?;
            let aug = generate_augmented(&train, seed)?;
            let path = r.output("augmented.jsonl")?;
            aug.save_jsonl(&path)?;
            let growth = (aug.len() as f64 / train.len() as f64 - 1.0) * 100.0;
            info!("augmented {} -> {} instances (+{growth:.1}%) in {}", train.len(), aug.len(), path.display());
        }
        Command::AnnotateSample { data, cf, n, seed } => {
            let r = data.resolve()?;
            let ds = r.load(Split::Dev)?;
            let cf_path = cf.unwrap_or_else(|| r.out.join(CF_FILE));
            let cfs = CounterfactualSet::load_jsonl(&cf_path, &ds)?;
            let path = r.output("annotation.csv")?;
            let file = File::create(&path).map_err(|e| CatError::io(&path, e))?;
            let rows = export_annotation_sample(&cfs, &ds, n, seed, BufWriter::new(file))?;
            info!("wrote {rows} rows to {}; fill in human_label with holds/fails", path.display());
        }
        Command::ScoreAnnotation { file } => {
            let s = score_annotation_file(&file)?;
            println!("label flip holds: {:.1}% ({} of {} annotated)", s.accuracy, s.holds, s.n);
        }
        Command::Predict(args) => {
            let pipe = Pipeline::load(args.load()?)?;
            let cache = open_cache(&pipe.config.cache_path())?;
            let cfs = pipe.gen_cf()?;
            let stats = pipe.predict(&cfs, &cache)?;
            info!(
                "{} items, {} sent in {} request(s), rest from cache",
                stats.items, stats.items_sent, stats.requests
            );
        }
        Command::Score(args) => {
            let pipe = Pipeline::load(args.load()?)?;
            let rows = pipe.score()?;
            print!("{}", render_markdown(&rows));
        }
        Command::Report(args) => {
            let pipe = Pipeline::load(args.load()?)?;
            let cache = open_cache(&pipe.config.cache_path())?;
            let summary = pipe.end_to_end(&cache)?;
            info!(
                "{} request(s) sent; reports in {}",
                summary.stats.requests,
                pipe.out_dir().display()
            );
            print!("{}", render_markdown(&summary.rows));
        }
    }
    Ok(())
}

fn open_cache(path: &Path) -> Result<PredictionCache> {
    let cache = PredictionCache::open(path)?;
    info!("prediction cache {} ({} entries)", path.display(), cache.len());
    Ok(cache)
}

fn exit_code(err: &CatError) -> u8 {
    match err.root() {
        CatError::Config(_) | CatError::InvalidTask(_) => 1,
        CatError::Transport(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
