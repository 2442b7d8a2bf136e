//! The `nestgraph` command line.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    corpus_stats, generate_synthetic, load_jsonl, write_jsonl, Entity, Sentence, SynthParams,
};
use crate::encoder::load_precomputed_vectors;
use crate::error::{Error, Result};
use crate::hypergraph::{build_hypergraph, dump, Tag};
use crate::nn::Tensor;
use crate::pipeline::{
    decode_tags, evaluate, load_checkpoint, predict_batch, save_checkpoint, threshold_sweep,
    train_with, Corpus, EpochMetrics, EvalReport, Example, Model, ModelConfig, PredictOptions,
    Prediction, TrainConfig, DEFAULT_THRESHOLDS,
};

/// Environment variable that overrides the training seed of a run config.
pub const SEED_ENV: &str = "NESTGRAPH_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "nestgraph",
    version,
    about = "Nested entity recognition with local hypergraphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic nested-entity corpus as JSONL.
    Synth(SynthArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Predict entities for a JSONL corpus.
    Predict(PredictArgs),
    /// Score predictions against gold entities.
    Eval(EvalArgs),
    /// Score a model under several end thresholds.
    Sweep(SweepArgs),
    /// Print the local hypergraph of one start token.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthParams::default().n_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthParams::default().nesting_rate)]
    pub nesting_rate: f64,
    #[arg(long, default_value_t = SynthParams::default().max_depth)]
    pub max_depth: usize,
    #[arg(long, default_value_t = SynthParams::default().max_len)]
    pub max_len: usize,
    /// Also write corpus statistics as JSON to this file.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// End threshold, or `none` to disable the filter. Defaults to the
    /// model's training setting.
    #[arg(long, value_parser = parse_threshold)]
    pub threshold: Option<Threshold>,
    /// Sampling multiplier. Defaults to the model's evaluation setting.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Precomputed context vectors for the input corpus.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction records, or any corpus JSONL file.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated thresholds; `none` is the unfiltered setting.
    #[arg(long, value_delimiter = ',', value_parser = parse_threshold, default_value = "none,0.1,0.2,0.5,0.8")]
    pub thresholds: Vec<Threshold>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Tags to build the hypergraph from, e.g. `I,E0,O`. Without it the
    /// model decodes from `--start` in sentence `--sentence-index`.
    #[arg(long, value_delimiter = ',', value_parser = parse_tag)]
    pub tags: Option<Vec<Tag>>,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub sentence_index: usize,
}

/// A parsed `--threshold` value; `Threshold(None)` disables the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold(pub Option<f64>);

pub fn parse_threshold(s: &str) -> std::result::Result<Threshold, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Threshold(None));
    }
    let t: f64 = s
        .parse()
        .map_err(|_| format!("{s:?} is neither a probability nor `none`"))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(format!("threshold {t} outside [0, 1]"));
    }
    Ok(Threshold(Some(t)))
}

pub fn parse_tag(s: &str) -> std::result::Result<Tag, String> {
    match s {
        "I" => Ok(Tag::I),
        "O" => Ok(Tag::O),
        _ => s
            .strip_prefix('E')
            .map(|c| c.trim_start_matches(['(', '-']).trim_end_matches(')'))
            .and_then(|c| c.parse().ok())
            .map(Tag::E)
            .ok_or_else(|| format!("{s:?} is not a tag (I, O or E<class id>)")),
    }
}

/// Optional precomputed context vectors per corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// A training run. Relative paths are resolved against the config file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Receives `metrics.json`, the checkpoint unless `checkpoint` is set,
    /// and test predictions.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub vectors: VectorPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

impl RunConfig {
    /// Parses a config and resolves its paths; the seed environment
    /// override is applied when `seed_override` is given.
    pub fn load(path: &Path, seed_override: Option<&str>) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.train);
        fix(&mut cfg.output_dir);
        for p in [&mut cfg.dev, &mut cfg.test, &mut cfg.checkpoint]
            .into_iter()
            .chain([
                &mut cfg.vectors.train,
                &mut cfg.vectors.dev,
                &mut cfg.vectors.test,
            ])
            .flatten()
        {
            fix(p);
        }
        if let Some(seed) = seed_override {
            cfg.training.seed = seed.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer"))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let inputs = [Some(&self.train), self.dev.as_ref(), self.test.as_ref()]
            .into_iter()
            .chain([
                self.vectors.train.as_ref(),
                self.vectors.dev.as_ref(),
                self.vectors.test.as_ref(),
            ])
            .flatten();
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "input file {} does not exist",
                    p.display()
                )));
            }
        }
        self.model.encoder.validate()?;
        self.training.validate()
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.nhg"))
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sentence: usize,
    pub entities: Vec<PredictedEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
    pub end_score: f64,
}

impl PredictionRecord {
    pub fn new(sentence: usize, prediction: &Prediction, class_names: &[String]) -> Self {
        let mut entities: Vec<PredictedEntity> = prediction
            .entities
            .iter()
            .map(|e| PredictedEntity {
                start: e.start,
                end: e.end,
                label: class_names
                    .get(e.class_id)
                    .cloned()
                    .unwrap_or_else(|| e.class_id.to_string()),
                end_score: prediction.end_probs[e.end],
            })
            .collect();
        entities.sort_by(|a, b| (a.start, a.end, &a.label).cmp(&(b.start, b.end, &b.label)));
        PredictionRecord { sentence, entities }
    }
}

/// Written by `train` next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub dev: Option<EvalReport>,
    pub test: Option<EvalReport>,
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => {
            let seed = std::env::var(SEED_ENV).ok();
            let cfg = RunConfig::load(&a.config, seed.as_deref())?;
            cmd_train(&cfg).map(|_| ())
        }
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => {
            let report = cmd_eval(&a.pred, &a.gold)?;
            emit_json(&report, a.out.as_deref())
        }
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Inspect(a) => {
            print!("{}", cmd_inspect(&a)?);
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    match out {
        Some(p) => fs::write(p, text + "\n").map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let params = SynthParams {
        n_classes: a.classes,
        max_depth: a.max_depth,
        nesting_rate: a.nesting_rate,
        max_len: a.max_len,
    };
    let corpus = generate_synthetic(a.seed, a.n, &params)?;
    write_jsonl(&a.out, &corpus)?;
    if let Some(p) = &a.stats {
        emit_json(&corpus_stats(&corpus), Some(p))?;
    }
    Ok(())
}

fn load_vectors(
    path: Option<&Path>,
    sentences: &[Sentence],
    d_lm: usize,
) -> Result<Option<Vec<Tensor>>> {
    path.map(|p| load_precomputed_vectors(p, sentences, d_lm))
        .transpose()
}

fn write_predictions(path: &Path, preds: &[Prediction], class_names: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (i, p) in preds.iter().enumerate() {
        let line = serde_json::to_string(&PredictionRecord::new(i, p, class_names))
            .expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn predict_examples(
    model: &Model,
    examples: &[Example],
    options: PredictOptions,
) -> Result<Vec<Prediction>> {
    let ids: Vec<_> = examples.iter().map(|e| &e.ids).collect();
    predict_batch(model, &ids, options)
}

fn report_for(model: &Model, examples: &[Example], preds: &[Prediction]) -> Result<EvalReport> {
    let sets: Vec<BTreeSet<Entity>> = preds.iter().map(|p| p.entities.clone()).collect();
    let golds: Vec<BTreeSet<Entity>> = examples.iter().map(|e| e.gold.clone()).collect();
    evaluate(&sets, &golds, model.class_names())
}

/// Trains, then writes the checkpoint, `metrics.json` and, with a test
/// corpus, `predictions.test.jsonl`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainMetrics> {
    let d_lm = cfg.model.encoder.d_lm;
    let train = load_jsonl(&cfg.train)?;
    let dev = cfg
        .dev
        .as_ref()
        .map(load_jsonl)
        .transpose()?
        .unwrap_or_default();
    let test = cfg.test.as_ref().map(load_jsonl).transpose()?;
    let train_vec = load_vectors(cfg.vectors.train.as_deref(), &train, d_lm)?;
    let dev_vec = load_vectors(cfg.vectors.dev.as_deref(), &dev, d_lm)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;

    let outcome = train_with(
        Corpus {
            sentences: &train,
            vectors: train_vec.as_deref(),
        },
        Corpus {
            sentences: &dev,
            vectors: dev_vec.as_deref(),
        },
        cfg.model,
        cfg.training,
        |m| match m.dev {
            Some(d) => eprintln!(
                "epoch {:>3}  loss {:.4}  dev P {:.4} R {:.4} F1 {:.4}",
                m.epoch, m.train_loss, d.precision, d.recall, d.f1
            ),
            None => eprintln!("epoch {:>3}  loss {:.4}", m.epoch, m.train_loss),
        },
    )?;
    let model = outcome.model;
    save_checkpoint(&model, cfg.checkpoint_path())?;
    let options = PredictOptions::from_model(&model);

    let dev_report = if dev.is_empty() {
        None
    } else {
        let ex = model.prepare(&dev, dev_vec.as_deref())?;
        Some(report_for(
            &model,
            &ex,
            &predict_examples(&model, &ex, options)?,
        )?)
    };
    let test_report = match &test {
        Some(test) => {
            let vec = load_vectors(cfg.vectors.test.as_deref(), test, d_lm)?;
            let ex = model.prepare(test, vec.as_deref())?;
            let preds = predict_examples(&model, &ex, options)?;
            write_predictions(
                &cfg.output_dir.join("predictions.test.jsonl"),
                &preds,
                model.class_names(),
            )?;
            Some(report_for(&model, &ex, &preds)?)
        }
        None => None,
    };
    let metrics = TrainMetrics {
        epochs: outcome.log,
        best_epoch: outcome.best_epoch,
        dev: dev_report,
        test: test_report,
    };
    emit_json(&metrics, Some(&cfg.output_dir.join("metrics.json")))?;
    Ok(metrics)
}

fn options_for(
    model: &Model,
    lambda: Option<f64>,
    threshold: Option<Threshold>,
) -> Result<PredictOptions> {
    let mut options = PredictOptions::from_model(model);
    if let Some(l) = lambda {
        if !(l > 0.0) {
            return Err(Error::Config(format!("lambda {l} must be positive")));
        }
        options.lambda = l;
    }
    if let Some(Threshold(t)) = threshold {
        options.threshold = t;
    }
    Ok(options)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let options = options_for(&model, a.lambda, a.threshold)?;
    let sentences = load_jsonl(&a.input)?;
    let vectors = load_vectors(a.vectors.as_deref(), &sentences, model.config.encoder.d_lm)?;
    // Gold spans in the input are irrelevant here, so unseen labels are fine.
    let unlabeled: Vec<Sentence> = sentences
        .iter()
        .map(|s| Sentence {
            entities: Vec::new(),
            ..s.clone()
        })
        .collect();
    let examples = model.prepare(&unlabeled, vectors.as_deref())?;
    let preds = predict_examples(&model, &examples, options)?;
    write_predictions(&a.out, &preds, model.class_names())
}

#[derive(Debug, Deserialize)]
struct ScoredLine {
    #[serde(default)]
    sentence: Option<usize>,
    #[serde(default)]
    entities: Vec<ScoredEntity>,
}

#[derive(Debug, Deserialize)]
struct ScoredEntity {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: String,
}

fn read_scored(path: &Path) -> Result<Vec<Vec<ScoredEntity>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Vec<ScoredEntity>> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoredLine = serde_json::from_str(&line).map_err(|source| Error::Json {
            line: i + 1,
            source,
        })?;
        if let Some(s) = rec.sentence {
            if s != out.len() {
                return Err(Error::Corpus {
                    line: i + 1,
                    message: format!("record for sentence {s} where {} was expected", out.len()),
                });
            }
        }
        out.push(rec.entities);
    }
    Ok(out)
}

/// Strict scores of predictions against a gold corpus. Classes are matched
/// by name.
pub fn cmd_eval(pred: &Path, gold: &Path) -> Result<EvalReport> {
    let preds = read_scored(pred)?;
    let golds = load_jsonl(gold)?;
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} prediction lines for {} gold sentences",
            preds.len(),
            golds.len()
        )));
    }
    let names: Vec<String> = preds
        .iter()
        .flatten()
        .map(|e| e.label.clone())
        .chain(
            golds
                .iter()
                .flat_map(|s| s.entities.iter().map(|e| e.label.clone())),
        )
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let pred_sets: Vec<BTreeSet<Entity>> = preds
        .iter()
        .map(|p| {
            p.iter()
                .map(|e| Entity::new(e.start, e.end, index[e.label.as_str()]))
                .collect()
        })
        .collect();
    let gold_sets: Vec<BTreeSet<Entity>> = golds
        .iter()
        .map(|s| {
            s.entities
                .iter()
                .map(|e| Entity::new(e.start, e.end, index[e.label.as_str()]))
                .collect()
        })
        .collect();
    evaluate(&pred_sets, &gold_sets, &names)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let sentences = load_jsonl(&a.data)?;
    let vectors = load_vectors(a.vectors.as_deref(), &sentences, model.config.encoder.d_lm)?;
    let examples = model.prepare(&sentences, vectors.as_deref())?;
    let lambda = options_for(&model, a.lambda, None)?.lambda;
    let thresholds: Vec<Option<f64>> = if a.thresholds.is_empty() {
        DEFAULT_THRESHOLDS.to_vec()
    } else {
        a.thresholds.iter().map(|t| t.0).collect()
    };
    let rows = threshold_sweep(&model, &examples, &thresholds, lambda)?;
    for r in &rows {
        let t = r.threshold.map_or("None".to_string(), |t| format!("{t}"));
        let s = r.report.overall;
        eprintln!(
            "{t:>6}  P {:.4}  R {:.4}  F1 {:.4}",
            s.precision, s.recall, s.f1
        );
    }
    emit_json(&rows, a.out.as_deref())
}

/// The hypergraph dump of literal tags, or of the model's decoding.
pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    if let Some(tags) = &a.tags {
        return Ok(dump(&build_hypergraph(a.start, tags)?, &[]));
    }
    let (Some(ckpt), Some(data)) = (&a.checkpoint, &a.data) else {
        return Err(Error::Config(
            "inspect needs --tags, or --checkpoint with --data".into(),
        ));
    };
    let model = load_checkpoint(ckpt)?;
    let sentences = load_jsonl(data)?;
    let sentence = sentences.get(a.sentence_index).ok_or_else(|| {
        Error::Config(format!(
            "sentence index {} outside a corpus of {}",
            a.sentence_index,
            sentences.len()
        ))
    })?;
    if a.start >= sentence.len() {
        return Err(Error::Config(format!(
            "start {} outside a {}-token sentence",
            a.start,
            sentence.len()
        )));
    }
    let unlabeled = Sentence {
        entities: Vec::new(),
        ..sentence.clone()
    };
    let ex = model.prepare(&[unlabeled], None)?;
    let tags = decode_tags(&model, &ex[0].ids, a.start)?;
    Ok(dump(
        &build_hypergraph(a.start, &tags)?,
        model.class_names(),
    ))
}
