//! Mini-batch training of encoder + head under the weighted loss.
//!
//! One master seed derives the per-epoch shuffle and per-step dropout
//! streams, so a run is reproducible end to end. The checkpoint kept is the
//! one with the best dev weighted F1 (ties keep the earlier epoch). The last
//! partial batch is trained, not dropped. Per-epoch wall-clock covers
//! forward+backward only, leaving I/O and evaluation out so length/compute
//! comparisons stay meaningful.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, ModelParams};
use crate::classifier::{self, HeadLeaves};
use crate::corpus::LabeledSentence;
use crate::encoder::{self, EncoderConfig, EncoderLeaves, ForwardMode};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::numerics::{ComputeGraph, NodeId};
use crate::seeding::{derive, Stream};
use crate::tokenizer::{encode, EncodedSequence, Vocabulary};

const EVAL_BATCH: usize = 32;

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight on the causal-class loss term.
    pub alpha: f64,
    pub max_len: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global-norm gradient clip; off by default.
    pub clip_norm: Option<f64>,
    pub encoder: EncoderConfig,
}

impl TrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha: 1.0,
            max_len: 128,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_len < 3 {
            return Err(Error::config(format!(
                "max_len must be at least 3, got {}",
                self.max_len
            )));
        }
        if self.max_len > self.encoder.max_position {
            return Err(Error::config(format!(
                "max_len {} exceeds encoder max_position {}",
                self.max_len, self.encoder.max_position
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::config(format!("clip norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam update for one flat tensor.
///
/// `t` is the 1-based step count shared by all tensors in the set.
pub fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First/second moment accumulators, one pair per model tensor.
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients accumulated on `params`.
    /// Tensors without a gradient are treated as having zero gradient.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        let mut named = params.named_tensors_mut();
        if named.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer state tracks {} tensors, model has {}",
                self.m.len(),
                named.len()
            )));
        }
        self.step += 1;
        for (i, (_, tensor)) in named.iter_mut().enumerate() {
            if self.m[i].len() != tensor.len() {
                return Err(Error::shape(format!(
                    "optimizer slot {i} holds {} values, tensor has {}",
                    self.m[i].len(),
                    tensor.len()
                )));
            }
            let g: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; tensor.len()],
            };
            adam_update(
                tensor.data_mut(),
                &g,
                &mut self.m[i],
                &mut self.v[i],
                self.step,
                lr,
                beta1,
                beta2,
                eps,
            );
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(params: &mut ModelParams, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in params.named_tensors() {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for (_, t) in params.named_tensors_mut() {
            t.scale_grad(factor);
        }
    }
    norm
}

/// Leaf handles for every model tensor on one graph.
pub struct ModelLeaves {
    pub encoder: EncoderLeaves,
    pub head: HeadLeaves,
}

impl ModelLeaves {
    /// Names and nodes in [`ModelParams::named_tensors`] order.
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = self.encoder.named();
        out.extend(self.head.named());
        out
    }
}

/// Forward + weighted loss for one batch on a fresh graph.
pub fn build_loss_graph(
    params: &ModelParams,
    batch: &[EncodedSequence],
    labels: &[u8],
    alpha: f64,
    mode: ForwardMode,
) -> Result<(ComputeGraph, NodeId, ModelLeaves)> {
    if batch.len() != labels.len() {
        return Err(Error::shape(format!(
            "batch has {} sequences but {} labels",
            batch.len(),
            labels.len()
        )));
    }
    let mut g = ComputeGraph::new();
    let enc = encoder::insert_leaves(&mut g, &params.encoder);
    let head = classifier::insert_head_leaves(&mut g, &params.head);
    let pooled = encoder::forward_on_graph(&mut g, &enc, &params.encoder.config, batch, mode)?;
    let probs = classifier::probs_on_graph(&mut g, &head, pooled)?;
    let root = classifier::loss_on_graph(&mut g, probs, labels, alpha)?;
    Ok((g, root, ModelLeaves { encoder: enc, head }))
}

/// One prediction dump row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub id: String,
    pub p_causal: f64,
    pub label: u8,
}

/// Write rows as `id;p_causal;label`, one per input, in input order.
pub fn write_prediction_dump(path: impl AsRef<std::path::Path>, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{};{};{}\n", r.id, r.p_causal, r.label));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    /// Seconds spent in forward+backward for this epoch.
    pub train_seconds: f64,
    pub dev: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train report serializes")
    }

    pub fn final_dev_f1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.dev.weighted_avg.f1)
    }
}

/// Report plus the retained (best-dev-F1) parameters.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub params: ModelParams,
}

fn encode_all(vocab: &Vocabulary, data: &[LabeledSentence], max_len: usize) -> Result<Vec<EncodedSequence>> {
    data.iter().map(|s| encode(vocab, &s.text, max_len)).collect()
}

/// Train on `train_split`, evaluating on `dev_split` after every epoch.
///
/// With `epochs = 0` the returned parameters are the freshly initialized
/// ones and the report is empty.
pub fn train(
    train_split: &[LabeledSentence],
    dev_split: &[LabeledSentence],
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_split.is_empty() {
        return Err(Error::EmptyInput("train split has no sentences".into()));
    }
    if config.encoder.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "encoder vocab_size {} does not match vocabulary of {} tokens",
            config.encoder.vocab_size,
            vocab.len()
        )));
    }
    if config.epochs > 0 && dev_split.is_empty() {
        return Err(Error::EmptyInput("dev split has no sentences".into()));
    }

    let train_enc = encode_all(vocab, train_split, config.max_len)?;
    let train_labels: Vec<u8> = train_split.iter().map(|s| s.label).collect();

    let mut params = ModelParams::init(&config.encoder, config.seed)?;
    let mut adam = AdamState::new(&params);
    let mut best_params = params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut global_step: u64 = 0;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive(config.seed, Stream::EpochShuffle, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut compute_seconds = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<EncodedSequence> =
                chunk.iter().map(|&i| train_enc[i].clone()).collect();
            let labels: Vec<u8> = chunk.iter().map(|&i| train_labels[i]).collect();
            let dropout_seed = derive(config.seed, Stream::Dropout, global_step);

            let started = Instant::now();
            let (mut graph, root, leaves) = build_loss_graph(
                &params,
                &batch,
                &labels,
                config.alpha,
                ForwardMode::Train { dropout_seed },
            )?;
            graph.backward(root)?;
            compute_seconds += started.elapsed().as_secs_f64();

            loss_sum += graph.value(root)[0] * chunk.len() as f64;
            let named_leaves = leaves.named();
            for ((leaf_name, node), (name, tensor)) in
                named_leaves.iter().zip(params.named_tensors_mut())
            {
                debug_assert_eq!(leaf_name, &name);
                tensor.accumulate_grad(graph.grad(*node));
            }
            if let Some(max_norm) = config.clip_norm {
                clip_gradients(&mut params, max_norm);
            }
            adam.step(
                &mut params,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.adam_eps,
            )?;
            params.zero_grads();
            global_step += 1;
        }

        let (dev_metrics, _) = evaluate_params(&params, dev_split, vocab, config.max_len)?;
        let f1 = dev_metrics.weighted_avg.f1;
        epochs.push(EpochReport {
            epoch,
            train_loss: loss_sum / train_split.len() as f64,
            train_seconds: compute_seconds,
            dev: dev_metrics,
        });
        // Strict improvement keeps the earlier epoch on ties.
        if f1 > best_f1 {
            best_f1 = f1;
            best_epoch = Some(epoch);
            best_params = params.clone();
        }
    }

    Ok(TrainOutcome {
        report: TrainReport { epochs, best_epoch },
        params: best_params,
    })
}

/// Eval-mode predictions for labeled data, plus metrics.
pub fn evaluate_params(
    params: &ModelParams,
    data: &[LabeledSentence],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation dataset is empty".into()));
    }
    let items: Vec<(String, String)> = data
        .iter()
        .map(|s| (s.id.clone(), s.text.clone()))
        .collect();
    let rows = predict(params, vocab, &items, max_len)?;
    let preds: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let golds: Vec<u8> = data.iter().map(|s| s.label).collect();
    let report = metrics::score(&preds, &golds)?;
    Ok((report, rows))
}

/// Eval-mode predictions for (id, text) items, in input order.
pub fn predict(
    params: &ModelParams,
    vocab: &Vocabulary,
    items: &[(String, String)],
    max_len: usize,
) -> Result<Vec<PredictionRow>> {
    if items.is_empty() {
        return Err(Error::EmptyInput("nothing to predict".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let batch: Vec<EncodedSequence> = chunk
            .iter()
            .map(|(_, text)| encode(vocab, text, max_len))
            .collect::<Result<_>>()?;
        let pooled = encoder::encode_forward(&params.encoder, &batch, ForwardMode::Eval)?;
        let preds = classifier::classify(&params.head, &pooled)?;
        for ((id, _), pred) in chunk.iter().zip(preds) {
            rows.push(PredictionRow {
                id: id.clone(),
                p_causal: pred.p_causal(),
                label: pred.label,
            });
        }
    }
    Ok(rows)
}

/// Evaluate a loaded checkpoint, enforcing the vocabulary fingerprint
/// recorded in its manifest.
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &[LabeledSentence],
    vocab: &Vocabulary,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    let found = vocab.fingerprint();
    if checkpoint.manifest.vocab_hash != found {
        return Err(Error::VocabMismatch {
            expected: checkpoint.manifest.vocab_hash.clone(),
            found,
        });
    }
    evaluate_params(&checkpoint.params, data, vocab, checkpoint.manifest.max_len)
}
