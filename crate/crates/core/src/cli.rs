//! Command-line entry point: `prepare`, `train`, `eval`, `extract`, `inspect-tags` and
//! `bench`. Every successful run writes one JSON run manifest.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    build_vocabularies, categorize_sentence, load_dataset, write_native, AnnotatedSentence,
    CorpusError, DatasetFormat, VocabConfig,
};
use crate::evaluator::{self, flat_report, table_report, EvalError};
use crate::tagset::{encode_he, encode_ter, render};
use crate::trainer::{gold_heads, Checkpoint, TrainConfig, TrainError, Trainer};

pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Io { .. } | CliError::Corpus(CorpusError::Io { .. }) => "io",
            CliError::Corpus(_) | CliError::Input(_) => "data",
            CliError::Train(TrainError::Checkpoint { .. }) => "checkpoint",
            CliError::Train(_) => "training",
            CliError::Eval(_) => "evaluation",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "io" => 3,
            "data" => 4,
            "checkpoint" => 5,
            "training" => 6,
            _ => 7,
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "etlspan", version, about = "Joint entity and relation extraction")]
pub struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Breakdown {
    Category,
    Count,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a dataset to the native format and write its vocabularies.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "native")]
        format: DatasetFormat,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_token_count: usize,
    },
    /// Train a model and save the checkpoint with the best dev F1.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Train this many runs with consecutive seeds and report mean and deviation.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Score predictions against gold triplets.
    Eval {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        by: Option<Breakdown>,
    },
    /// Extract triplets with a trained model.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the boundary tags of one corpus sentence.
    InspectTags {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        sentence_id: usize,
    },
    /// Measure decoding throughput in batches per second.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Extract { .. } => "extract",
            Command::InspectTags { .. } => "inspect-tags",
            Command::Bench { .. } => "bench",
        }
    }

    fn default_manifest(&self) -> PathBuf {
        match self {
            Command::Prepare { out, .. } | Command::Train { out, .. } => out.join("run_manifest.json"),
            Command::Extract { out, .. } => {
                let mut name = out.file_name().unwrap_or_default().to_os_string();
                name.push(".run_manifest.json");
                out.with_file_name(name)
            }
            _ => PathBuf::from("run_manifest.json"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusFingerprint {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub corpora: Vec<CorpusFingerprint>,
    pub artifacts: Vec<String>,
    pub duration_seconds: f64,
}

pub fn fingerprint(path: &Path) -> Result<CorpusFingerprint, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(CorpusFingerprint {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

struct Run {
    config: Value,
    seed: Option<u64>,
    corpora: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    output: String,
}

impl Run {
    fn new(output: String) -> Self {
        Self {
            config: Value::Null,
            seed: None,
            corpora: Vec::new(),
            artifacts: Vec::new(),
            output,
        }
    }
}

fn load_native(path: &Path) -> Result<Vec<AnnotatedSentence>, CliError> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    Ok(load_dataset(path, DatasetFormat::Native)?.sentences)
}

fn prepare(input: &Path, format: DatasetFormat, out: &Path, min_token_count: usize) -> Result<Run, CliError> {
    if !input.exists() {
        return Err(io_err(input, "no such file"));
    }
    let data = load_dataset(input, format)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let corpus = out.join("corpus.jsonl");
    write_native(&corpus, &data.sentences)?;
    let vocabs = build_vocabularies(&data.sentences, VocabConfig { min_token_count })?;
    vocabs.write_dir(out)?;
    let mut categories = std::collections::BTreeMap::new();
    for s in &data.sentences {
        let key = categorize_sentence(s).map_or("none".to_string(), |c| c.to_string());
        *categories.entry(key).or_insert(0usize) += 1;
    }
    let mut output = format!(
        "sentences={}\nduplicate_triplets={}\nunlocated_mentions={}\n",
        data.sentences.len(),
        data.report.duplicate_triplets,
        data.report.unlocated_mentions
    );
    for (k, n) in &categories {
        output.push_str(&format!("category.{k}={n}\n"));
    }
    let mut run = Run::new(output);
    run.config = json!({ "format": format!("{format:?}"), "min_token_count": min_token_count });
    run.corpora.push(input.to_path_buf());
    run.artifacts.push(corpus);
    run.artifacts.push(out.to_path_buf());
    Ok(run)
}

fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn train(
    config: Option<&Path>,
    train_path: &Path,
    dev_path: &Path,
    out: &Path,
    seed: Option<u64>,
    seeds: u64,
) -> Result<Run, CliError> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if seeds == 0 {
        return Err(CliError::Input("--seeds must be at least 1".into()));
    }
    let train_data = load_native(train_path)?;
    let dev_data = load_native(dev_path)?;
    let vocabs = build_vocabularies(&train_data, VocabConfig::default())?;
    let mut run = Run::new(String::new());
    run.config = serde_json::to_value(&cfg).expect("configuration serializes");
    run.seed = Some(cfg.seed);
    run.corpora = vec![train_path.to_path_buf(), dev_path.to_path_buf()];
    if let Some(p) = config {
        run.corpora.push(p.to_path_buf());
    }
    let mut scores = Vec::new();
    for k in 0..seeds {
        let run_cfg = TrainConfig {
            seed: cfg.seed + k,
            ..cfg.clone()
        };
        let dir = if seeds == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("seed-{}", run_cfg.seed))
        };
        info!("training with seed {}", run_cfg.seed);
        let outcome = Trainer::new(run_cfg, vocabs.clone())?.fit(&train_data, &dev_data)?;
        outcome.best.save(&dir)?;
        run.output.push_str(&format!(
            "seed={} epochs={} best_epoch={} dev_f1={:.6} skipped_sentences={} skipped_heads={}\n",
            outcome.best.config.seed,
            outcome.history.len(),
            outcome.best.epoch,
            outcome.best.dev_f1,
            outcome.prepare.skipped_sentences,
            outcome.prepare.skipped_heads,
        ));
        scores.push(outcome.best.dev_f1);
        run.artifacts.push(dir);
    }
    let (mean, stdev) = mean_stdev(&scores);
    run.output.push_str(&format!("dev_f1_mean={mean:.6}\ndev_f1_stdev={stdev:.6}\n"));
    Ok(run)
}

fn eval(gold: &Path, pred: &Path, by: Option<Breakdown>) -> Result<Run, CliError> {
    let g = load_native(gold)?;
    let p = load_native(pred)?;
    let overall = evaluator::score(&g, &p)?;
    let output = match by {
        None => {
            let none = std::collections::BTreeMap::<String, _>::new();
            format!("{}\n{}", flat_report(&overall, &none), table_report(&overall, &none))
        }
        Some(Breakdown::Category) => {
            let b = evaluator::score_by_category(&g, &p)?;
            format!("{}\n{}", flat_report(&overall, &b), table_report(&overall, &b))
        }
        Some(Breakdown::Count) => {
            let b = evaluator::score_by_count(&g, &p)?;
            format!("{}\n{}", flat_report(&overall, &b), table_report(&overall, &b))
        }
    };
    let mut run = Run::new(output);
    run.config = json!({ "by": by.map(|b| format!("{b:?}").to_lowercase()) });
    run.corpora = vec![gold.to_path_buf(), pred.to_path_buf()];
    Ok(run)
}

fn extract(model_dir: &Path, input: &Path, out: &Path) -> Result<Run, CliError> {
    let ckpt = Checkpoint::load(model_dir)?;
    let data = load_native(input)?;
    let pred = evaluator::predict(&ckpt.model, &data)?;
    write_native(out, &pred)?;
    let triplets: usize = pred.iter().map(|s| s.triplets().len()).sum();
    let mut run = Run::new(format!("sentences={}\ntriplets={triplets}\n", pred.len()));
    run.config = serde_json::to_value(&ckpt.config).expect("configuration serializes");
    run.seed = Some(ckpt.config.seed);
    run.corpora = vec![input.to_path_buf()];
    run.artifacts = vec![out.to_path_buf()];
    Ok(run)
}

fn inspect_tags(corpus: &Path, id: usize) -> Result<Run, CliError> {
    let data = load_native(corpus)?;
    let s = data.get(id).ok_or_else(|| {
        CliError::Input(format!("sentence id {id} out of range (corpus has {})", data.len()))
    })?;
    let vocabs = build_vocabularies(std::slice::from_ref(s), VocabConfig::default())?;
    let tokens = s.sentence().tokens();
    let mut output = String::from("[head entities]\n");
    match encode_he(s, &vocabs.tags.entity_types, Default::default()) {
        Ok(t) => output.push_str(&render(tokens, &t, &vocabs.tags.entity_types)),
        Err(e) => output.push_str(&format!("{e}\n")),
    }
    for h in gold_heads(s) {
        output.push_str(&format!("\n[tails of head {h}]\n"));
        match encode_ter(s, &h, &vocabs.tags.relation_types) {
            Ok(t) => output.push_str(&render(tokens, &t, &vocabs.tags.relation_types)),
            Err(e) => output.push_str(&format!("{e}\n")),
        }
    }
    let mut run = Run::new(output);
    run.config = json!({ "sentence_id": id });
    run.corpora = vec![corpus.to_path_buf()];
    Ok(run)
}

fn bench(model_dir: &Path, input: &Path, batch_size: usize, epochs: usize) -> Result<Run, CliError> {
    let ckpt = Checkpoint::load(model_dir)?;
    let data = load_native(input)?;
    let sentences: Vec<_> = data.iter().map(|s| s.sentence().clone()).collect();
    let t = evaluator::measure_throughput(&ckpt.model, &sentences, batch_size, epochs)?;
    let mut output = format!(
        "batches_per_second={:.4}\nbatch_size={}\nbatches_per_epoch={}\n",
        t.batches_per_second, t.batch_size, t.batches_per_epoch
    );
    for (k, r) in t.per_epoch.iter().enumerate() {
        output.push_str(&format!("epoch{}.batches_per_second={r:.4}\n", k + 1));
    }
    let mut run = Run::new(output);
    run.config = json!({ "batch_size": batch_size, "epochs": t.per_epoch.len() });
    run.corpora = vec![input.to_path_buf()];
    Ok(run)
}

fn execute(command: &Command) -> Result<Run, CliError> {
    match command {
        Command::Prepare {
            input,
            format,
            out,
            min_token_count,
        } => prepare(input, *format, out, *min_token_count),
        Command::Train {
            config,
            train: t,
            dev,
            out,
            seed,
            seeds,
        } => train(config.as_deref(), t, dev, out, *seed, *seeds),
        Command::Eval { gold, pred, by } => eval(gold, pred, *by),
        Command::Extract { model, input, out } => extract(model, input, out),
        Command::InspectTags {
            corpus,
            sentence_id,
        } => inspect_tags(corpus, *sentence_id),
        Command::Bench {
            model,
            input,
            batch_size,
            epochs,
        } => bench(model, input, *batch_size, *epochs),
    }
}

fn write_manifest(path: &Path, command: &Command, run: &Run, secs: f64) -> Result<(), CliError> {
    let corpora = run
        .corpora
        .iter()
        .map(|p| fingerprint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = RunManifest {
        subcommand: command.name().to_string(),
        config: run.config.clone(),
        seed: run.seed,
        corpora,
        artifacts: run.artifacts.iter().map(|p| p.display().to_string()).collect(),
        duration_seconds: secs,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let started = Instant::now();
    let result = execute(&cli.command).and_then(|run| {
        let path = cli.manifest.clone().unwrap_or_else(|| cli.command.default_manifest());
        write_manifest(&path, &cli.command, &run, started.elapsed().as_secs_f64())?;
        Ok(run)
    });
    match result {
        Ok(run) => {
            print!("{}", run.output);
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}
