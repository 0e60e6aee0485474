//! Corpus loading, statistics, and stratified splitting.
//!
//! Records arrive as delimiter-separated text files with the schema
//! `id<delim>text<delim>label` (default delimiter `;`). Text fields may be
//! quoted with `"`, in which case embedded delimiters and newlines are fine.
//! A header row is skipped when its label field is non-numeric. Labels
//! outside {0, 1} are hard errors rather than skipped rows: silently dropping
//! records would corrupt the imbalance statistics that drive loss weighting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::seeding::{derive, Stream};

/// One corpus record: sentence text plus its binary causality label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSentence {
    pub id: String,
    pub text: String,
    /// 0 = non-causal, 1 = causal.
    pub label: u8,
}

/// Class counts and the non-causal : causal imbalance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_total: usize,
    pub n_causal: usize,
    pub n_noncausal: usize,
    /// `n_noncausal / n_causal`; infinity when the corpus has no causal
    /// sentences (serialized as null).
    #[serde(serialize_with = "serialize_ratio")]
    pub imbalance_ratio: f64,
}

fn serialize_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

fn reader_for(path: &Path, delimiter: char) -> Result<csv::Reader<std::fs::File>> {
    if !delimiter.is_ascii() {
        return Err(Error::config(format!(
            "delimiter {delimiter:?} is not a single-byte character"
        )));
    }
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter as u8)
        .has_headers(false)
        .flexible(true)
        .from_path(path)?)
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_error(err: csv::Error) -> Error {
    let line = match err.position() {
        Some(p) => p.line(),
        None => 0,
    };
    Error::parse(line, err.to_string())
}

fn parse_label(field: &str) -> Option<i64> {
    field.trim().parse::<i64>().ok()
}

/// Load `id<delim>text<delim>label` records in file order.
///
/// Text is preserved verbatim (no case folding); rows with a label outside
/// {0, 1}, fewer than three fields, or text that is empty after trimming are
/// reported as parse errors naming the offending line.
pub fn load_corpus(path: impl AsRef<Path>, delimiter: char) -> Result<Vec<LabeledSentence>> {
    let mut reader = reader_for(path.as_ref(), delimiter)?;
    let mut out = Vec::new();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record_line(&record);
        if first {
            first = false;
            // Header heuristic: skip the first row when its label field does
            // not parse as an integer.
            if record.get(2).and_then(parse_label).is_none() {
                continue;
            }
        }
        if record.len() < 3 {
            return Err(Error::parse(
                line,
                format!("expected at least 3 fields (id, text, label), got {}", record.len()),
            ));
        }
        let id = record.get(0).unwrap_or("").to_string();
        let text = record.get(1).unwrap_or("").to_string();
        let label_field = record.get(2).unwrap_or("");
        let label = match parse_label(label_field) {
            Some(0) => 0u8,
            Some(1) => 1u8,
            Some(other) => {
                return Err(Error::parse(
                    line,
                    format!("label {other} out of range {{0, 1}}"),
                ))
            }
            None => {
                return Err(Error::parse(
                    line,
                    format!("label {label_field:?} is not an integer"),
                ))
            }
        };
        if text.trim().is_empty() {
            return Err(Error::parse(line, "text is empty after trimming"));
        }
        out.push(LabeledSentence { id, text, label });
    }
    if out.is_empty() {
        return Err(Error::NoRecords);
    }
    Ok(out)
}

/// Write records in the same schema `load_corpus` reads. Fields are quoted
/// only when they contain the delimiter, quotes, or newlines.
pub fn write_corpus(
    path: impl AsRef<Path>,
    records: &[LabeledSentence],
    delimiter: char,
) -> Result<()> {
    if !delimiter.is_ascii() {
        return Err(Error::config(format!(
            "delimiter {delimiter:?} is not a single-byte character"
        )));
    }
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter as u8)
        .from_path(path.as_ref())?;
    for r in records {
        writer.write_record([r.id.as_str(), r.text.as_str(), &r.label.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Exact class counts; `imbalance_ratio` is infinity when there are no causal
/// sentences.
pub fn compute_stats(corpus: &[LabeledSentence]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("corpus has no records".into()));
    }
    let n_causal = corpus.iter().filter(|s| s.label == 1).count();
    let n_noncausal = corpus.len() - n_causal;
    let imbalance_ratio = if n_causal == 0 {
        f64::INFINITY
    } else {
        n_noncausal as f64 / n_causal as f64
    };
    Ok(CorpusStats {
        n_total: corpus.len(),
        n_causal,
        n_noncausal,
        imbalance_ratio,
    })
}

/// Split the corpus into train/dev parts, stratified by class.
///
/// Each class is shuffled independently (ChaCha8, sub-seeded per class from
/// `seed`) and `floor(n_class * dev_fraction)` members go to dev, so per-class
/// dev proportions match `dev_fraction` within one sentence. Both splits keep
/// the original corpus order.
pub fn stratified_split(
    corpus: &[LabeledSentence],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledSentence>, Vec<LabeledSentence>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::config(format!(
            "dev fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let mut dev_marks = vec![false; corpus.len()];
    for class in 0u8..2 {
        let mut members: Vec<usize> = corpus
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < 2 {
            return Err(Error::config(format!(
                "class {class} has {} member(s); stratified split needs at least 2",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, Stream::Split, class as u64));
        members.shuffle(&mut rng);
        let n_dev = (members.len() as f64 * dev_fraction).floor() as usize;
        for &i in &members[..n_dev] {
            dev_marks[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        if dev_marks[i] {
            dev.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, dev))
}
