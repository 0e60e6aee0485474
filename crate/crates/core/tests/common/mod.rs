//! Shared fixtures for integration tests: synthetic corpora and a central
//! finite-difference oracle, kept independent of the backward pass it checks.

#![allow(dead_code)]

use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use causal_core::checkpoint::ModelParams;
use causal_core::corpus::LabeledSentence;
use causal_core::encoder::ForwardMode;
use causal_core::tokenizer::EncodedSequence;
use causal_core::trainer::build_loss_graph;

pub const FILLERS: [&str; 12] = [
    "shares", "report", "quarter", "market", "board", "prices", "figures", "outlook", "index",
    "costs", "margin", "sector",
];

pub const CAUSAL_MARKERS: [&str; 3] = ["because", "therefore", "consequently"];

fn filler_phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| *FILLERS.choose(rng).expect("pool non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Perfectly separable corpus: every causal sentence carries a marker token,
/// no non-causal sentence does. Labels alternate so batches stay mixed.
pub fn separable_corpus(n: usize, seed: u64) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let text = if label == 1 {
                let marker = *CAUSAL_MARKERS.choose(&mut rng).expect("non-empty");
                format!(
                    "{} {marker} {}",
                    filler_phrase(&mut rng, 3),
                    filler_phrase(&mut rng, 2)
                )
            } else {
                filler_phrase(&mut rng, 6)
            };
            LabeledSentence {
                id: format!("s{i}"),
                text,
                label,
            }
        })
        .collect()
}

/// Imbalanced (ratio:1) corpus with leaky markers: causal sentences carry a
/// marker with probability `signal`, non-causal ones with probability
/// `noise`. Gold labels stay exact; only the surface cue is noisy.
pub fn imbalanced_noisy_corpus(
    n_causal: usize,
    ratio: usize,
    signal: f64,
    noise: f64,
    seed: u64,
) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_causal * (ratio + 1));
    for i in 0..n_causal * (ratio + 1) {
        let label = u8::from(i % (ratio + 1) == 0);
        let p_marker = if label == 1 { signal } else { noise };
        let text = if rng.random::<f64>() < p_marker {
            let marker = *CAUSAL_MARKERS.choose(&mut rng).expect("non-empty");
            format!(
                "{} {marker} {}",
                filler_phrase(&mut rng, 2),
                filler_phrase(&mut rng, 2)
            )
        } else {
            filler_phrase(&mut rng, 5)
        };
        out.push(LabeledSentence {
            id: format!("x{i}"),
            text,
            label,
        });
    }
    out
}

pub fn write_corpus_file(path: &std::path::Path, corpus: &[LabeledSentence]) {
    causal_core::corpus::write_corpus(path, corpus, ';').expect("write corpus");
}

/// Relative error with an absolute floor: central differences at h=1e-5
/// carry ~1e-10 absolute roundoff, so coordinates below the floor are
/// effectively compared at atol = 1e-8 (the usual atol/rtol split with
/// rtol = 1e-4).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Worst finite-difference disagreement and where it happened.
#[derive(Debug, Clone, Default)]
pub struct FdWorst {
    pub err: f64,
    pub tensor: String,
    pub coord: usize,
    pub ad: f64,
    pub fd: f64,
}

/// Central finite differences of the batch loss with respect to sampled
/// parameter coordinates; returns the worst relative error against the
/// reverse-mode gradient.
///
/// `coords_per_tensor` caps how many coordinates of each tensor get probed
/// (small tensors are probed exhaustively).
pub fn fd_worst_error(
    params: &ModelParams,
    batch: &[EncodedSequence],
    labels: &[u8],
    alpha: f64,
    coords_per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> FdWorst {
    let h = 1e-5;
    let (mut graph, root, leaves) =
        build_loss_graph(params, batch, labels, alpha, ForwardMode::Eval).expect("loss graph");
    graph.backward(root).expect("backward");
    let grads: Vec<(String, Vec<f64>)> = leaves
        .named()
        .into_iter()
        .map(|(name, node)| (name, graph.grad(node).to_vec()))
        .collect();

    let eval = |p: &ModelParams| -> f64 {
        let (g, root, _) =
            build_loss_graph(p, batch, labels, alpha, ForwardMode::Eval).expect("loss graph");
        g.value(root)[0]
    };

    let mut worst = FdWorst::default();
    let named: Vec<(String, usize)> = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, t.len()))
        .collect();
    for (ti, (name, len)) in named.iter().enumerate() {
        debug_assert_eq!(&grads[ti].0, name);
        let coords: Vec<usize> = if *len <= coords_per_tensor {
            (0..*len).collect()
        } else {
            (0..coords_per_tensor)
                .map(|_| rng.random_range(0..*len))
                .collect()
        };
        for j in coords {
            let mut plus = params.clone();
            plus.named_tensors_mut()[ti].1.data_mut()[j] += h;
            let mut minus = params.clone();
            minus.named_tensors_mut()[ti].1.data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads[ti].1[j];
            let err = rel_err(ad, fd);
            if err > worst.err {
                worst = FdWorst {
                    err,
                    tensor: name.clone(),
                    coord: j,
                    ad,
                    fd,
                };
            }
        }
    }
    worst
}
