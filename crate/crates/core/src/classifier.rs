//! Two-way linear softmax head and the imbalance-weighted cross-entropy.
//!
//! The loss treats the softmax probability of the causal class as the
//! predicted probability: `L = -alpha*y*ln(p) - (1-y)*ln(1-p)`, which for a
//! 2-way softmax equals class-weighted cross-entropy with weights (1, alpha).
//! `alpha` defaults to the corpus imbalance ratio elsewhere in the pipeline;
//! raising it penalizes false negatives more, trading precision for recall.
//! Batch loss is the plain mean over examples (no re-normalization by total
//! weight).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{ComputeGraph, NodeId, Tensor};

/// Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] before any log.
pub const PROB_EPS: f64 = 1e-12;

/// Linear head: row 0 scores the non-causal class, row 1 the causal class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// [2, d_model]
    pub weight: Tensor,
    /// [2]
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init(d_model: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadParams {
            weight: Tensor::randn(vec![2, d_model], INIT_STD, &mut rng),
            bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("head.weight".into(), &self.weight),
            ("head.bias".into(), &self.bias),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.weight".into(), &mut self.weight),
            ("head.bias".into(), &mut self.bias),
        ]
    }
}

/// Class probabilities and the argmax label for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// (p_noncausal, p_causal); sums to 1.
    pub probs: (f64, f64),
    pub label: u8,
}

impl Prediction {
    pub fn p_causal(&self) -> f64 {
        self.probs.1
    }
}

/// logits = pooled.W^T + b, probs = softmax(logits), label = argmax.
/// An exact probability tie resolves to label 0 (the majority class).
pub fn classify(head: &HeadParams, pooled: &Tensor) -> Result<Vec<Prediction>> {
    let d = head.d_model();
    if pooled.shape().len() != 2 || pooled.shape()[1] != d {
        return Err(Error::shape(format!(
            "pooled shape {:?} does not match head d_model {d}",
            pooled.shape()
        )));
    }
    let batch = pooled.shape()[0];
    let w = head.weight.data();
    let b = head.bias.data();
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = &pooled.data()[i * d..(i + 1) * d];
        let mut logits = [b[0], b[1]];
        for (j, &x) in row.iter().enumerate() {
            logits[0] += w[j] * x;
            logits[1] += w[d + j] * x;
        }
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let z = e0 + e1;
        let probs = (e0 / z, e1 / z);
        // Strict comparison keeps ties at label 0.
        let label = u8::from(probs.1 > probs.0);
        out.push(Prediction { probs, label });
    }
    Ok(out)
}

/// The weighted binary cross-entropy for a single example.
pub fn weighted_loss(p_causal: f64, y_true: u8, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
    }
    debug_assert!(y_true <= 1);
    let p = p_causal.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let y = f64::from(y_true);
    Ok(-alpha * y * p.ln() - (1.0 - y) * (1.0 - p).ln())
}

/// Mean of [`weighted_loss`] over a batch.
pub fn batch_weighted_loss(p_causal: &[f64], y_true: &[u8], alpha: f64) -> Result<f64> {
    if p_causal.len() != y_true.len() || p_causal.is_empty() {
        return Err(Error::shape(format!(
            "batch loss wants equal nonzero lengths, got {} and {}",
            p_causal.len(),
            y_true.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &y) in p_causal.iter().zip(y_true) {
        total += weighted_loss(p, y, alpha)?;
    }
    Ok(total / p_causal.len() as f64)
}

/// Head leaves on a compute graph.
pub struct HeadLeaves {
    pub weight: NodeId,
    pub bias: NodeId,
}

pub fn insert_head_leaves(g: &mut ComputeGraph, head: &HeadParams) -> HeadLeaves {
    HeadLeaves {
        weight: g.leaf(&head.weight),
        bias: g.leaf(&head.bias),
    }
}

impl HeadLeaves {
    pub fn named(&self) -> Vec<(String, NodeId)> {
        vec![
            ("head.weight".into(), self.weight),
            ("head.bias".into(), self.bias),
        ]
    }
}

/// Class probabilities [batch, 2] for pooled representations on the graph.
pub fn probs_on_graph(
    g: &mut ComputeGraph,
    head: &HeadLeaves,
    pooled: NodeId,
) -> Result<NodeId> {
    let wt = g.transpose(head.weight, 0, 1)?;
    let logits = g.matmul(pooled, wt)?;
    let logits = g.add_broadcast(logits, head.bias)?;
    g.softmax(logits, 1)
}

/// Scalar training loss: mean over examples of the weighted cross-entropy,
/// reading `1 - p_causal` as the non-causal softmax probability.
pub fn loss_on_graph(
    g: &mut ComputeGraph,
    probs: NodeId,
    labels: &[u8],
    alpha: f64,
) -> Result<NodeId> {
    if alpha <= 0.0 {
        return Err(Error::config(format!("alpha must be > 0, got {alpha}")));
    }
    let batch = labels.len();
    if g.shape(probs) != [batch, 2] {
        return Err(Error::shape(format!(
            "probabilities shape {:?} does not match {batch} labels",
            g.shape(probs)
        )));
    }
    let logp = g.log_clamped(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    // Per-example weights: non-causal term -(1-y), causal term -alpha*y.
    let mut w = Vec::with_capacity(batch * 2);
    for &y in labels {
        debug_assert!(y <= 1);
        let yf = f64::from(y);
        w.push(-(1.0 - yf));
        w.push(-alpha * yf);
    }
    let wn = g.constant(vec![batch, 2], w)?;
    let weighted = g.mul(logp, wn)?;
    let total = g.sum_all(weighted);
    Ok(g.mul_scalar(total, 1.0 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn zero_head_ties_to_label_zero() {
        let head = HeadParams {
            weight: Tensor::zeros(vec![2, 4]),
            bias: Tensor::zeros(vec![2]),
        };
        let pooled = Tensor::new(vec![1, 4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let preds = classify(&head, &pooled).unwrap();
        assert_eq!(preds[0].probs, (0.5, 0.5));
        assert_eq!(preds[0].label, 0);
    }

    // Direct softmax of logits (0, 10): p_causal = 1 / (1 + e^-10).
    #[test]
    fn bias_only_head() {
        let head = HeadParams {
            weight: Tensor::zeros(vec![2, 3]),
            bias: Tensor::from_vec(vec![0.0, 10.0]),
        };
        let pooled = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let preds = classify(&head, &pooled).unwrap();
        assert_close(preds[0].p_causal(), 0.999_954_602_131_297_6, 1e-12);
        assert_eq!(preds[0].label, 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let head = HeadParams::init(8, 0);
        let pooled = Tensor::zeros(vec![2, 4]);
        assert!(classify(&head, &pooled).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let head = HeadParams::init(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pooled = Tensor::randn(vec![5, 6], 1.0, &mut rng);
        for p in classify(&head, &pooled).unwrap() {
            assert!((p.probs.0 + p.probs.1 - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn perfect_positive_has_near_zero_loss() {
        let l = weighted_loss(1.0 - PROB_EPS, 1, 7.0).unwrap();
        assert!(l.abs() < 1e-9, "{l}");
    }

    // Direct evaluation of the loss formula.
    #[test]
    fn hand_computed_losses() {
        assert_close(weighted_loss(0.5, 1, 2.0).unwrap(), 2.0 * LN2, 1e-12);
        // Alpha does not touch negative examples.
        assert_close(weighted_loss(0.5, 0, 3.0).unwrap(), LN2, 1e-12);
        assert_close(weighted_loss(0.5, 0, 300.0).unwrap(), LN2, 1e-12);
    }

    #[test]
    fn alpha_one_is_plain_binary_cross_entropy() {
        for p in [0.05f64, 0.3, 0.5, 0.9] {
            for y in [0u8, 1u8] {
                let yf = f64::from(y);
                let bce = -yf * p.ln() - (1.0 - yf) * (1.0 - p).ln();
                assert_close(weighted_loss(p, y, 1.0).unwrap(), bce, 1e-15);
            }
        }
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        assert!(weighted_loss(0.5, 1, 0.0).is_err());
        assert!(weighted_loss(0.5, 1, -2.0).is_err());
        assert!(batch_weighted_loss(&[0.5], &[1], 0.0).is_err());
    }

    #[test]
    fn loss_is_nondecreasing_in_alpha_for_positives() {
        for p in [0.1, 0.5, 0.99] {
            let lo = weighted_loss(p, 1, 1.0).unwrap();
            let hi = weighted_loss(p, 1, 8.0).unwrap();
            assert!(hi >= lo);
        }
    }

    #[test]
    fn graph_loss_matches_scalar_path() {
        let head = HeadParams::init(5, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pooled = Tensor::randn(vec![6, 5], 1.0, &mut rng);
        let labels = [1u8, 0, 0, 1, 0, 0];
        let alpha = 3.5;

        let preds = classify(&head, &pooled).unwrap();
        let p1: Vec<f64> = preds.iter().map(|p| p.p_causal()).collect();
        let scalar = batch_weighted_loss(&p1, &labels, alpha).unwrap();

        let mut g = ComputeGraph::new();
        let leaves = insert_head_leaves(&mut g, &head);
        let pooled_node = g.leaf(&pooled);
        let probs = probs_on_graph(&mut g, &leaves, pooled_node).unwrap();
        let loss = loss_on_graph(&mut g, probs, &labels, alpha).unwrap();
        assert_close(g.value(loss)[0], scalar, 1e-9);
    }

    // Finite-difference check of the full head + weighted loss.
    #[test]
    fn head_loss_gradients_match_fd() {
        let head = HeadParams::init(4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pooled = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let labels = [1u8, 0, 1];
        let alpha = 4.0;
        let h = 1e-5;

        let eval = |w: &Tensor, b: &Tensor| -> f64 {
            let mut g = ComputeGraph::new();
            let leaves = HeadLeaves {
                weight: g.leaf(w),
                bias: g.leaf(b),
            };
            let pn = g.leaf(&pooled);
            let probs = probs_on_graph(&mut g, &leaves, pn).unwrap();
            let loss = loss_on_graph(&mut g, probs, &labels, alpha).unwrap();
            g.value(loss)[0]
        };

        let mut g = ComputeGraph::new();
        let leaves = insert_head_leaves(&mut g, &head);
        let pn = g.leaf(&pooled);
        let probs = probs_on_graph(&mut g, &leaves, pn).unwrap();
        let loss = loss_on_graph(&mut g, probs, &labels, alpha).unwrap();
        g.backward(loss).unwrap();

        for (ti, (node, param)) in [(leaves.weight, &head.weight), (leaves.bias, &head.bias)]
            .into_iter()
            .enumerate()
        {
            let ad = g.grad(node);
            for j in 0..param.len() {
                let mut plus = param.clone();
                plus.data_mut()[j] += h;
                let mut minus = param.clone();
                minus.data_mut()[j] -= h;
                let (fp, fm) = if ti == 0 {
                    (eval(&plus, &head.bias), eval(&minus, &head.bias))
                } else {
                    (eval(&head.weight, &plus), eval(&head.weight, &minus))
                };
                let fd = (fp - fm) / (2.0 * h);
                let denom = ad[j].abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((ad[j] - fd).abs() / denom) < 1e-4,
                    "tensor {ti} coord {j}: ad={} fd={fd}",
                    ad[j]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn positive_scaling_never_changes_labels(
            scale in 0.01f64..50.0,
            data in proptest::collection::vec(-2.0f64..2.0, 8),
            x in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let d = 3;
            let weight = Tensor::new(vec![2, d], data[..6].to_vec()).unwrap();
            let bias = Tensor::from_vec(data[6..].to_vec());
            let head = HeadParams { weight, bias };
            let scaled = HeadParams {
                weight: Tensor::new(vec![2, d], head.weight.data().iter().map(|v| v * scale).collect()).unwrap(),
                bias: Tensor::from_vec(head.bias.data().iter().map(|v| v * scale).collect()),
            };
            let pooled = Tensor::new(vec![1, d], x).unwrap();
            let a = classify(&head, &pooled).unwrap()[0].label;
            let b = classify(&scaled, &pooled).unwrap()[0].label;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn alpha_monotonicity_of_loss(
            p in 0.01f64..0.99,
            a1 in 0.1f64..4.0,
            extra in 0.0f64..8.0,
        ) {
            let a2 = a1 + extra;
            // Positives: non-decreasing in alpha. Negatives: exactly flat.
            prop_assert!(weighted_loss(p, 1, a2).unwrap() >= weighted_loss(p, 1, a1).unwrap());
            prop_assert_eq!(weighted_loss(p, 0, a2).unwrap(), weighted_loss(p, 0, a1).unwrap());
        }
    }
}
