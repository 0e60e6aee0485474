//! Command implementations behind the `causal` binary: vocabulary building,
//! training, evaluation, prediction, corpus utilities, and the two sweep
//! experiments (sequence length and encoder profile).
//!
//! Argument structs double as a programmatic API; integration tests drive
//! the same functions the binary dispatches to.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CreationMeta};
use crate::corpus::{self, LabeledSentence};
use crate::encoder::{EncoderConfig, Pooling, Profile};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::tokenizer::{self, Casing, Vocabulary};
use crate::trainer::{self, TrainConfig, TrainReport};

pub const TOOL_NAME: &str = "causal";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_delimiter(s: &str) -> Result<char> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(Error::config(format!(
            "--delimiter must be a single character, got {s:?}"
        ))),
    }
}

fn parse_casing(s: &str) -> Result<Casing> {
    Casing::from_str(s).map_err(|e| Error::config(format!("--casing: {e}")))
}

fn parse_profile(s: &str) -> Result<Profile> {
    Profile::from_str(s).map_err(|e| Error::config(format!("--profile: {e}")))
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    Pooling::from_str(s).map_err(|e| Error::config(format!("--pooling: {e}")))
}

fn check_dev_fraction(f: f64) -> Result<f64> {
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(Error::config(format!(
            "--dev-fraction must lie in (0, 1), got {f}"
        )))
    }
}

/// Hyperparameter flags shared by train and sweep.
#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Encoder profile: tiny, small, or medium.
    #[arg(long, default_value = "tiny")]
    pub profile: String,

    /// Truncation length (tokens per encoded sentence).
    #[arg(long, default_value_t = 128)]
    pub max_len: usize,

    /// Causal-class loss weight; defaults to the train-split imbalance ratio.
    #[arg(long)]
    pub alpha: Option<f64>,

    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Fraction of each class held out for dev.
    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,

    /// Dropout rate after attention weights and feed-forward activations.
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,

    /// Sentence pooling: cls or mean.
    #[arg(long, default_value = "cls")]
    pub pooling: String,

    /// Optional global gradient-norm clip.
    #[arg(long)]
    pub clip_norm: Option<f64>,

    /// Tokenizer casing the vocabulary was built with: cased or uncased.
    #[arg(long, default_value = "cased")]
    pub casing: String,
}

impl TrainFlags {
    fn encoder_config(&self, vocab_size: usize, max_len: usize) -> Result<EncoderConfig> {
        let profile = parse_profile(&self.profile)?;
        let mut cfg = profile.config(vocab_size, max_len);
        cfg.dropout_rate = self.dropout;
        cfg.pooling = parse_pooling(&self.pooling)?;
        Ok(cfg)
    }

    fn train_config(&self, vocab_size: usize, max_len: usize, alpha: f64) -> Result<TrainConfig> {
        if self.lr <= 0.0 {
            return Err(Error::config(format!("--lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("--batch-size must be at least 1"));
        }
        if max_len < 3 {
            return Err(Error::config(format!(
                "--max-len must be at least 3, got {max_len}"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::config(format!("--alpha must be > 0, got {alpha}")));
        }
        let mut cfg = TrainConfig::new(self.encoder_config(vocab_size, max_len)?);
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.learning_rate = self.lr;
        cfg.alpha = alpha;
        cfg.max_len = max_len;
        cfg.seed = self.seed;
        cfg.clip_norm = self.clip_norm;
        Ok(cfg)
    }
}

fn split_corpus_for_run(
    data: &Path,
    delimiter: char,
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSentence>, Vec<LabeledSentence>)> {
    let records = corpus::load_corpus(data, delimiter)?;
    corpus::stratified_split(&records, check_dev_fraction(dev_fraction)?, seed)
}

/// Default alpha = train-split imbalance ratio, per the loss design.
fn resolve_alpha(explicit: Option<f64>, train_split: &[LabeledSentence]) -> Result<f64> {
    if let Some(a) = explicit {
        return Ok(a);
    }
    let stats = corpus::compute_stats(train_split)?;
    if !stats.imbalance_ratio.is_finite() || stats.imbalance_ratio <= 0.0 {
        return Err(Error::config(format!(
            "cannot derive --alpha from a one-class train split ({} causal / {} non-causal); pass --alpha explicitly",
            stats.n_causal, stats.n_noncausal
        )));
    }
    Ok(stats.imbalance_ratio)
}

// ---------------------------------------------------------------------------
// build-vocab

#[derive(Debug, Clone, Args)]
pub struct BuildVocabArgs {
    /// Labeled corpus file (id<delim>text<delim>label).
    #[arg(long)]
    pub data: PathBuf,

    /// Output vocabulary file (one token per line).
    #[arg(long)]
    pub vocab: PathBuf,

    #[arg(long, default_value_t = 4096)]
    pub vocab_size: usize,

    /// Minimum frequency for alphabet symbols and pair merges.
    #[arg(long, default_value_t = 2)]
    pub min_freq: u64,

    #[arg(long, default_value = "cased")]
    pub casing: String,

    #[arg(long, default_value = ";")]
    pub delimiter: String,
}

pub fn cmd_build_vocab(args: &BuildVocabArgs) -> Result<Vocabulary> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let casing = parse_casing(&args.casing)?;
    let records = corpus::load_corpus(&args.data, delimiter)?;
    let vocab = tokenizer::build_vocab(&records, args.vocab_size, args.min_freq, casing)?;
    vocab.save(&args.vocab)?;
    let cov = tokenizer::coverage(&vocab, records.iter().map(|s| s.text.as_str()));
    println!("vocabulary: {} tokens ({casing})", vocab.len());
    println!("coverage on build corpus: {cov:.4}");
    println!("wrote {}", args.vocab.display());
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// stats / split

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,
}

pub fn cmd_stats(args: &StatsArgs) -> Result<String> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let records = corpus::load_corpus(&args.data, delimiter)?;
    let stats = corpus::compute_stats(&records)?;
    let json = stats.to_json();
    println!("{json}");
    Ok(json)
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long, default_value_t = 0.2)]
    pub dev_fraction: f64,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,
}

pub fn cmd_split(args: &SplitArgs) -> Result<(PathBuf, PathBuf)> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let (train, dev) = split_corpus_for_run(&args.data, delimiter, args.dev_fraction, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let train_path = args.out_dir.join("train.csv");
    let dev_path = args.out_dir.join("dev.csv");
    corpus::write_corpus(&train_path, &train, delimiter)?;
    corpus::write_corpus(&dev_path, &dev, delimiter)?;
    println!(
        "split {} records into {} train / {} dev",
        train.len() + dev.len(),
        train.len(),
        dev.len()
    );
    Ok((train_path, dev_path))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Labeled corpus file.
    #[arg(long)]
    pub data: PathBuf,

    /// Vocabulary file from build-vocab.
    #[arg(long)]
    pub vocab: PathBuf,

    /// Output directory for the checkpoint and reports.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,

    #[command(flatten)]
    pub flags: TrainFlags,
}

fn epoch_table(report: &TrainReport) -> String {
    let mut out = String::from("epoch | train loss | dev weighted F1 | seconds\n");
    for e in &report.epochs {
        out.push_str(&format!(
            "{:<5} | {:<10.6} | {:<15.6} | {:.2}\n",
            e.epoch, e.train_loss, e.dev.weighted_avg.f1, e.train_seconds
        ));
    }
    out
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let casing = parse_casing(&args.flags.casing)?;
    let (train_split, dev_split) =
        split_corpus_for_run(&args.data, delimiter, args.flags.dev_fraction, args.flags.seed)?;
    let alpha = resolve_alpha(args.flags.alpha, &train_split)?;
    let vocab = Vocabulary::load(&args.vocab, casing)?;
    let config = args
        .flags
        .train_config(vocab.len(), args.flags.max_len, alpha)?;

    let outcome = trainer::train(&train_split, &dev_split, &vocab, &config)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt_dir = args.out_dir.join("checkpoint");
    let creation = CreationMeta {
        tool: TOOL_NAME.into(),
        tool_version: TOOL_VERSION.into(),
        seed: config.seed,
        alpha,
        epochs_trained: config.epochs,
        best_epoch: outcome.report.best_epoch,
    };
    let ckpt = Checkpoint::new(
        outcome.params,
        config.max_len,
        casing,
        vocab.fingerprint(),
        creation,
    );
    ckpt.save(&ckpt_dir)?;
    std::fs::write(
        args.out_dir.join("train_report.json"),
        outcome.report.to_json(),
    )?;

    print!("{}", epoch_table(&outcome.report));
    match outcome.report.best_epoch {
        Some(e) => println!("best epoch: {e}"),
        None => println!("no epochs trained; checkpoint holds initial parameters"),
    }
    println!("checkpoint: {}", ckpt_dir.display());
    Ok(outcome.report)
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Labeled corpus file to score.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub vocab: PathBuf,

    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,
}

fn metrics_table(m: &MetricsReport) -> String {
    let mut out = String::from("class      | precision | recall   | f1       | support\n");
    for (name, c) in [
        ("non-causal", m.class_0),
        ("causal", m.class_1),
        ("macro", m.macro_avg),
        ("weighted", m.weighted_avg),
    ] {
        out.push_str(&format!(
            "{:<10} | {:<9.6} | {:<8.6} | {:<8.6} | {}\n",
            name, c.p, c.r, c.f1, c.support
        ));
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab, ckpt.manifest.casing)?;
    let records = corpus::load_corpus(&args.data, delimiter)?;
    let (metrics, rows) = trainer::evaluate(&ckpt, &records, &vocab)?;

    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("metrics.json"), metrics.to_json())?;
    trainer::write_prediction_dump(args.out_dir.join("predictions.csv"), &rows)?;

    print!("{}", metrics_table(&metrics));
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// predict

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Unlabeled input: id<delim>text rows, no header.
    #[arg(long)]
    pub data: PathBuf,

    #[arg(long)]
    pub vocab: PathBuf,

    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Output dump path (id;p_causal;label).
    #[arg(long, default_value = "predictions.csv")]
    pub out: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,
}

/// Read `id<delim>text` rows. No header handling: every row is data.
pub fn read_unlabeled(path: &Path, delimiter: char) -> Result<Vec<(String, String)>> {
    if !delimiter.is_ascii() {
        return Err(Error::config(format!(
            "--delimiter {delimiter:?} is not a single-byte character"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(0, e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 2 {
            return Err(Error::parse(
                line,
                format!("expected at least 2 fields (id, text), got {}", record.len()),
            ));
        }
        out.push((
            record.get(0).unwrap_or("").to_string(),
            record.get(1).unwrap_or("").to_string(),
        ));
    }
    if out.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(out)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<usize> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let vocab = Vocabulary::load(&args.vocab, ckpt.manifest.casing)?;
    let found = vocab.fingerprint();
    if ckpt.manifest.vocab_hash != found {
        return Err(Error::VocabMismatch {
            expected: ckpt.manifest.vocab_hash.clone(),
            found,
        });
    }
    let items = read_unlabeled(&args.data, delimiter)?;
    let rows = trainer::predict(&ckpt.params, &vocab, &items, ckpt.manifest.max_len)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    trainer::write_prediction_dump(&args.out, &rows)?;
    println!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(rows.len())
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Length,
    Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Forward+backward seconds summed over training.
    pub train_seconds: f64,
}

/// Rows of (configuration, F1, precision, recall) plus per-row compute time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Aligned text table; the four columns mirror the reference layout.
    pub fn table(&self) -> String {
        let key_header = match self.kind {
            SweepKind::Length => "Sequence length",
            SweepKind::Profile => "Model",
        };
        let mut out = format!("{key_header} | F1 Score | Precision | Recall\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$} | {:<8.6} | {:<9.6} | {:.6}\n",
                r.key,
                r.f1,
                r.precision,
                r.recall,
                width = key_header.len()
            ));
        }
        out
    }

    /// Compute time per row, printed separately so the main table keeps the
    /// reference column layout.
    pub fn runtime_lines(&self) -> String {
        let mut out = String::from("train seconds per configuration:\n");
        for r in &self.rows {
            out.push_str(&format!("  {}: {:.3}\n", r.key, r.train_seconds));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep report serializes")
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Labeled corpus file.
    #[arg(long)]
    pub data: PathBuf,

    /// Optional prebuilt vocabulary; built from the train split when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,

    /// Sequence lengths to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256, 512])]
    pub lengths: Vec<usize>,

    /// Profile names to sweep instead of lengths (e.g. tiny,small).
    #[arg(long, value_delimiter = ',')]
    pub profiles: Vec<String>,

    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,

    #[arg(long, default_value = ";")]
    pub delimiter: String,

    /// Vocabulary budget when building the sweep vocabulary in place.
    #[arg(long, default_value_t = 2048)]
    pub vocab_size: usize,

    #[arg(long, default_value_t = 1)]
    pub min_freq: u64,

    #[command(flatten)]
    pub flags: TrainFlags,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<SweepReport> {
    let delimiter = parse_delimiter(&args.delimiter)?;
    let casing = parse_casing(&args.flags.casing)?;
    let (train_split, dev_split) =
        split_corpus_for_run(&args.data, delimiter, args.flags.dev_fraction, args.flags.seed)?;
    let alpha = resolve_alpha(args.flags.alpha, &train_split)?;
    let vocab = match &args.vocab {
        Some(path) => Vocabulary::load(path, casing)?,
        None => tokenizer::build_vocab(&train_split, args.vocab_size, args.min_freq, casing)?,
    };

    let kind = if args.profiles.is_empty() {
        SweepKind::Length
    } else {
        SweepKind::Profile
    };
    // (row key, profile name, max_len) per configuration.
    let configs: Vec<(String, String, usize)> = match kind {
        SweepKind::Length => {
            if args.lengths.is_empty() {
                return Err(Error::config("--lengths is empty"));
            }
            args.lengths
                .iter()
                .map(|&l| (l.to_string(), args.flags.profile.clone(), l))
                .collect()
        }
        SweepKind::Profile => args
            .profiles
            .iter()
            .map(|p| (p.clone(), p.clone(), args.flags.max_len))
            .collect(),
    };

    let mut rows = Vec::with_capacity(configs.len());
    for (key, profile, max_len) in &configs {
        let run = || -> Result<SweepRow> {
            let mut flags = args.flags.clone();
            flags.profile = profile.clone();
            let config = flags.train_config(vocab.len(), *max_len, alpha)?;
            let outcome = trainer::train(&train_split, &dev_split, &vocab, &config)?;
            let train_seconds: f64 = outcome.report.epochs.iter().map(|e| e.train_seconds).sum();
            let last = outcome
                .report
                .epochs
                .last()
                .ok_or_else(|| Error::config("sweep needs --epochs >= 1"))?;
            Ok(SweepRow {
                key: key.clone(),
                f1: last.dev.weighted_avg.f1,
                precision: last.dev.weighted_avg.p,
                recall: last.dev.weighted_avg.r,
                train_seconds,
            })
        };
        // One bad configuration aborts the whole sweep, naming itself.
        let row = run().map_err(|e| {
            Error::config(format!("sweep configuration {key:?} failed: {e}"))
        })?;
        rows.push(row);
    }

    let report = SweepReport { kind, rows };
    std::fs::create_dir_all(&args.out_dir)?;
    std::fs::write(args.out_dir.join("sweep.json"), report.to_json())?;
    std::fs::write(
        args.out_dir.join("sweep.txt"),
        format!("{}\n{}", report.table(), report.runtime_lines()),
    )?;
    print!("{}", report.table());
    print!("{}", report.runtime_lines());
    Ok(report)
}
