//! Transformer encoder: token + position embeddings, multi-head attention
//! with key-side padding masks, GELU feed-forward blocks, post-residual
//! layer norm, and CLS (or masked-mean) pooling.
//!
//! Padded positions are excluded on the key side of every attention product
//! and from mean pooling, so extending a sequence with PAD never changes the
//! pooled output.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ComputeGraph, NodeId, Tensor};
use crate::tokenizer::EncodedSequence;

/// Weights are drawn from a zero-mean normal with this standard deviation.
pub const INIT_STD: f64 = 0.02;

/// Surrogate for negative infinity in masked attention scores.
const MASK_FILL: f64 = -1e30;

/// Which hidden state becomes the sentence representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Hidden state at the CLS position.
    Cls,
    /// Mean over unmasked positions.
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::config(format!(
                "pooling must be 'cls' or 'mean', got {other:?}"
            ))),
        }
    }
}

/// Size profile of the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::config("encoder dimensions must be nonzero"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_position == 0 {
            return Err(Error::config("vocab_size and max_position must be nonzero"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total learnable scalars: embeddings plus, per layer, the four
    /// attention projections, the two feed-forward mats, and two norm pairs.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_position * d
            + self.n_layers * (4 * d * d + 2 * d * self.d_ff + 4 * d)
    }
}

/// Named encoder size presets: tiny (2/4/64/256), small (4/4/128/512),
/// medium (6/8/256/1024).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Tiny,
    Small,
    Medium,
}

impl Profile {
    /// (n_layers, n_heads, d_model, d_ff)
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Profile::Tiny => (2, 4, 64, 256),
            Profile::Small => (4, 4, 128, 512),
            Profile::Medium => (6, 8, 256, 1024),
        }
    }

    pub fn config(self, vocab_size: usize, max_position: usize) -> EncoderConfig {
        let (n_layers, n_heads, d_model, d_ff) = self.dims();
        EncoderConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff,
            vocab_size,
            max_position,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Tiny => "tiny",
            Profile::Small => "small",
            Profile::Medium => "medium",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "small" => Ok(Profile::Small),
            "medium" => Ok(Profile::Medium),
            other => Err(Error::config(format!(
                "unknown profile {other:?} (expected tiny, small, or medium)"
            ))),
        }
    }
}

/// Per-layer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub attn_norm_gamma: Tensor,
    pub attn_norm_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ff_norm_gamma: Tensor,
    pub ff_norm_beta: Tensor,
}

/// All learnable encoder weights. Shapes derive from [`EncoderConfig`] alone.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
}

/// Normal(0, 0.02) init for projections and embeddings; layer-norm gamma 1,
/// beta 0. Deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let token_embeddings = Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng);
    let position_embeddings = Tensor::randn(vec![config.max_position, d], INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            wq: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            wk: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            wv: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            wo: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            attn_norm_gamma: Tensor::full(vec![d], 1.0),
            attn_norm_beta: Tensor::zeros(vec![d]),
            w1: Tensor::randn(vec![d, config.d_ff], INIT_STD, &mut rng),
            w2: Tensor::randn(vec![config.d_ff, d], INIT_STD, &mut rng),
            ff_norm_gamma: Tensor::full(vec![d], 1.0),
            ff_norm_beta: Tensor::zeros(vec![d]),
        })
        .collect();
    Ok(EncoderParams {
        config: *config,
        token_embeddings,
        position_embeddings,
        layers,
    })
}

impl EncoderParams {
    /// Tensors in declared (checkpoint) order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("token_embeddings".into(), &self.token_embeddings));
        out.push(("position_embeddings".into(), &self.position_embeddings));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.wq"), &layer.wq));
            out.push((format!("layers.{i}.attn.wk"), &layer.wk));
            out.push((format!("layers.{i}.attn.wv"), &layer.wv));
            out.push((format!("layers.{i}.attn.wo"), &layer.wo));
            out.push((format!("layers.{i}.attn_norm.gamma"), &layer.attn_norm_gamma));
            out.push((format!("layers.{i}.attn_norm.beta"), &layer.attn_norm_beta));
            out.push((format!("layers.{i}.ff.w1"), &layer.w1));
            out.push((format!("layers.{i}.ff.w2"), &layer.w2));
            out.push((format!("layers.{i}.ff_norm.gamma"), &layer.ff_norm_gamma));
            out.push((format!("layers.{i}.ff_norm.beta"), &layer.ff_norm_beta));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("token_embeddings".into(), &mut self.token_embeddings));
        out.push(("position_embeddings".into(), &mut self.position_embeddings));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn.wq"), &mut layer.wq));
            out.push((format!("layers.{i}.attn.wk"), &mut layer.wk));
            out.push((format!("layers.{i}.attn.wv"), &mut layer.wv));
            out.push((format!("layers.{i}.attn.wo"), &mut layer.wo));
            out.push((format!("layers.{i}.attn_norm.gamma"), &mut layer.attn_norm_gamma));
            out.push((format!("layers.{i}.attn_norm.beta"), &mut layer.attn_norm_beta));
            out.push((format!("layers.{i}.ff.w1"), &mut layer.w1));
            out.push((format!("layers.{i}.ff.w2"), &mut layer.w2));
            out.push((format!("layers.{i}.ff_norm.gamma"), &mut layer.ff_norm_gamma));
            out.push((format!("layers.{i}.ff_norm.beta"), &mut layer.ff_norm_beta));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph leaf ids for one encoder parameter set, in declared order.
pub struct EncoderLeaves {
    pub token_embeddings: NodeId,
    pub position_embeddings: NodeId,
    pub layers: Vec<LayerLeaves>,
}

pub struct LayerLeaves {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub attn_norm_gamma: NodeId,
    pub attn_norm_beta: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub ff_norm_gamma: NodeId,
    pub ff_norm_beta: NodeId,
}

impl EncoderLeaves {
    /// (name, node) pairs in the same order as [`EncoderParams::named_tensors`].
    pub fn named(&self) -> Vec<(String, NodeId)> {
        let mut out = vec![
            ("token_embeddings".to_string(), self.token_embeddings),
            ("position_embeddings".to_string(), self.position_embeddings),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.wq"), layer.wq));
            out.push((format!("layers.{i}.attn.wk"), layer.wk));
            out.push((format!("layers.{i}.attn.wv"), layer.wv));
            out.push((format!("layers.{i}.attn.wo"), layer.wo));
            out.push((format!("layers.{i}.attn_norm.gamma"), layer.attn_norm_gamma));
            out.push((format!("layers.{i}.attn_norm.beta"), layer.attn_norm_beta));
            out.push((format!("layers.{i}.ff.w1"), layer.w1));
            out.push((format!("layers.{i}.ff.w2"), layer.w2));
            out.push((format!("layers.{i}.ff_norm.gamma"), layer.ff_norm_gamma));
            out.push((format!("layers.{i}.ff_norm.beta"), layer.ff_norm_beta));
        }
        out
    }
}

pub fn insert_leaves(g: &mut ComputeGraph, params: &EncoderParams) -> EncoderLeaves {
    EncoderLeaves {
        token_embeddings: g.leaf(&params.token_embeddings),
        position_embeddings: g.leaf(&params.position_embeddings),
        layers: params
            .layers
            .iter()
            .map(|l| LayerLeaves {
                wq: g.leaf(&l.wq),
                wk: g.leaf(&l.wk),
                wv: g.leaf(&l.wv),
                wo: g.leaf(&l.wo),
                attn_norm_gamma: g.leaf(&l.attn_norm_gamma),
                attn_norm_beta: g.leaf(&l.attn_norm_beta),
                w1: g.leaf(&l.w1),
                w2: g.leaf(&l.w2),
                ff_norm_gamma: g.leaf(&l.ff_norm_gamma),
                ff_norm_beta: g.leaf(&l.ff_norm_beta),
            })
            .collect(),
    }
}

/// Eval mode, or train mode carrying the seed for this step's dropout masks.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Scaled dot-product attention output: the context tensor and the softmax
/// weight tensor (exposed for inspection and tests).
pub struct AttentionOutput {
    pub context: NodeId,
    pub weights: NodeId,
}

/// Per-batch key keep-flags from a {0,1} mask, applying the degenerate rule:
/// an all-masked row attends to position 0.
fn key_keep_rows(mask: &Tensor) -> Result<Vec<Vec<bool>>> {
    if mask.shape().len() != 2 {
        return Err(Error::shape(format!(
            "attention mask must be [batch, len], got {:?}",
            mask.shape()
        )));
    }
    let (batch, len) = (mask.shape()[0], mask.shape()[1]);
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &mask.data()[b * len..(b + 1) * len];
        let mut keep: Vec<bool> = row.iter().map(|&v| v != 0.0).collect();
        if keep.iter().all(|&k| !k) {
            keep[0] = true;
        }
        rows.push(keep);
    }
    Ok(rows)
}

fn attention_inner(
    g: &mut ComputeGraph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    key_keep: &[Vec<bool>],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<AttentionOutput> {
    let shape = g.shape(q).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "attention expects [batch, heads, len, d_head], got {shape:?}"
        )));
    }
    let (batch, heads, len, d_head) = (shape[0], shape[1], shape[2], shape[3]);
    if g.shape(k) != shape.as_slice() || g.shape(v) != shape.as_slice() {
        return Err(Error::shape(format!(
            "attention q/k/v shapes differ: {:?} / {:?} / {:?}",
            shape,
            g.shape(k),
            g.shape(v)
        )));
    }
    if key_keep.len() != batch || key_keep.iter().any(|r| r.len() != len) {
        return Err(Error::shape(format!(
            "attention mask must be [{batch}, {len}]"
        )));
    }
    let kt = g.transpose(k, 2, 3)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.mul_scalar(scores, 1.0 / (d_head as f64).sqrt());
    // Expand the key mask over heads and query positions.
    let mut keep = Vec::with_capacity(batch * heads * len * len);
    for kr in key_keep.iter().take(batch) {
        for _ in 0..heads * len {
            keep.extend_from_slice(kr);
        }
    }
    let filled = g.masked_fill(scaled, &keep, MASK_FILL)?;
    let weights = g.softmax(filled, 3)?;
    let attended = match dropout {
        Some((rate, rng)) if rate > 0.0 => dropout_node(g, weights, rate, rng)?,
        _ => weights,
    };
    let context = g.matmul(attended, v)?;
    Ok(AttentionOutput { context, weights })
}

/// Scaled dot-product attention with a key-side padding mask.
///
/// `mask` is a {0,1} tensor of shape [batch, len]; masked keys get zero
/// weight and each weight row over the unmasked keys sums to 1. A fully
/// masked row is defined to attend to position 0.
pub fn attention(
    g: &mut ComputeGraph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    mask: &Tensor,
) -> Result<AttentionOutput> {
    let keep = key_keep_rows(mask)?;
    attention_inner(g, q, k, v, &keep, None)
}

/// Inverted dropout: multiply by a 0 / (1/(1-rate)) mask drawn from `rng`.
fn dropout_node(
    g: &mut ComputeGraph,
    x: NodeId,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    use rand::Rng;
    let n = g.value(x).len();
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let shape = g.shape(x).to_vec();
    let m = g.constant(shape, mask)?;
    g.mul(x, m)
}

/// Run the encoder over an encoded batch, returning the pooled node
/// [batch, d_model] on the graph.
pub fn forward_on_graph(
    g: &mut ComputeGraph,
    leaves: &EncoderLeaves,
    config: &EncoderConfig,
    batch: &[EncodedSequence],
    mode: ForwardMode,
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("encoder got an empty batch".into()));
    }
    let len = batch[0].max_len();
    if batch.iter().any(|s| s.max_len() != len) {
        return Err(Error::shape("batch sequences must share max_len"));
    }
    if len > config.max_position {
        return Err(Error::config(format!(
            "sequence length {len} exceeds max_position {}",
            config.max_position
        )));
    }
    for s in batch {
        if let Some(&bad) = s.token_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::config(format!(
                "token id {bad} out of range for vocab_size {}",
                config.vocab_size
            )));
        }
    }
    let b = batch.len();
    let d = config.d_model;
    let mut dropout_rng = match mode {
        ForwardMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        ForwardMode::Eval => None,
    };
    let rate = config.dropout_rate;

    // Embeddings: token rows plus a shared position table slice.
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.token_ids.iter().map(|&id| id as usize))
        .collect();
    let tok = g.gather(leaves.token_embeddings, &ids)?;
    let mut x = g.reshape(tok, vec![b, len, d])?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = g.gather(leaves.position_embeddings, &positions)?;
    x = g.add_broadcast(x, pos)?;

    let key_keep: Vec<Vec<bool>> = batch
        .iter()
        .map(|s| {
            let mut keep: Vec<bool> = s.attention_mask.iter().map(|&m| m != 0).collect();
            if keep.iter().all(|&k| !k) {
                keep[0] = true;
            }
            keep
        })
        .collect();

    let heads = config.n_heads;
    let d_head = config.d_head();
    for layer in &leaves.layers {
        // Multi-head attention with residual + norm.
        let x2 = g.reshape(x, vec![b * len, d])?;
        let split = |g: &mut ComputeGraph, w| -> Result<NodeId> {
            let proj = g.matmul(x2, w)?;
            let four = g.reshape(proj, vec![b, len, heads, d_head])?;
            g.transpose(four, 1, 2)
        };
        let q = split(g, layer.wq)?;
        let k = split(g, layer.wk)?;
        let v = split(g, layer.wv)?;
        let att = attention_inner(
            g,
            q,
            k,
            v,
            &key_keep,
            dropout_rng.as_mut().map(|r| (rate, r)),
        )?;
        let merged = g.transpose(att.context, 1, 2)?;
        let merged2 = g.reshape(merged, vec![b * len, d])?;
        let out = g.matmul(merged2, layer.wo)?;
        let out3 = g.reshape(out, vec![b, len, d])?;
        let res = g.add(x, out3)?;
        x = g.layer_norm(res, layer.attn_norm_gamma, layer.attn_norm_beta, 1e-12)?;

        // Feed-forward with residual + norm.
        let x2 = g.reshape(x, vec![b * len, d])?;
        let h = g.matmul(x2, layer.w1)?;
        let mut h = g.gelu(h);
        if let Some(rng) = dropout_rng.as_mut() {
            if rate > 0.0 {
                h = dropout_node(g, h, rate, rng)?;
            }
        }
        let o = g.matmul(h, layer.w2)?;
        let o3 = g.reshape(o, vec![b, len, d])?;
        let res = g.add(x, o3)?;
        x = g.layer_norm(res, layer.ff_norm_gamma, layer.ff_norm_beta, 1e-12)?;
    }

    match config.pooling {
        Pooling::Cls => {
            let x2 = g.reshape(x, vec![b * len, d])?;
            let cls_rows: Vec<usize> = (0..b).map(|i| i * len).collect();
            g.gather(x2, &cls_rows)
        }
        Pooling::Mean => {
            // Row of mask/count values per sentence; matmul does the sum.
            let mut w = Vec::with_capacity(b * len);
            for keep in &key_keep {
                let count = keep.iter().filter(|&&k| k).count().max(1) as f64;
                w.extend(keep.iter().map(|&k| if k { 1.0 / count } else { 0.0 }));
            }
            let wn = g.constant(vec![b, 1, len], w)?;
            let pooled3 = g.matmul(wn, x)?;
            g.reshape(pooled3, vec![b, d])
        }
    }
}

/// Convenience wrapper: run the encoder on a fresh graph and return the
/// pooled representation as a plain tensor.
pub fn encode_forward(
    params: &EncoderParams,
    batch: &[EncodedSequence],
    mode: ForwardMode,
) -> Result<Tensor> {
    let mut g = ComputeGraph::new();
    let leaves = insert_leaves(&mut g, params);
    let pooled = forward_on_graph(&mut g, &leaves, &params.config, batch, mode)?;
    Ok(g.tensor(pooled))
}
