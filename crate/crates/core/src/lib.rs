//! Causality detection for financial sentences.
//!
//! A self-contained pipeline: delimiter-separated corpora are loaded and
//! split with class stratification, a subword vocabulary is induced from the
//! data, a small transformer encoder pools each sentence into a vector, and a
//! two-way softmax head is trained under a class-weighted cross-entropy whose
//! positive-class weight counteracts the heavy non-causal/causal imbalance.
//! Everything runs on an in-crate f64 autodiff graph, is deterministic per
//! seed, and reports precision/recall/F1 per class with macro and weighted
//! averages.
//!
//! The `causal` binary (see the crate README) exposes the pipeline as
//! subcommands: `build-vocab`, `train`, `eval`, `predict`, `sweep`, `stats`,
//! and `split`.

pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod seeding;
pub mod tokenizer;
pub mod trainer;

pub use checkpoint::{Checkpoint, ModelParams};
pub use classifier::{classify, weighted_loss, HeadParams, Prediction};
pub use corpus::{compute_stats, load_corpus, stratified_split, CorpusStats, LabeledSentence};
pub use encoder::{encode_forward, init_params, EncoderConfig, EncoderParams, Profile};
pub use error::{Error, Result};
pub use metrics::{confusion, precision_recall_f1, ConfusionMatrix, MetricsReport};
pub use numerics::{ComputeGraph, NodeId, Tensor};
pub use tokenizer::{build_vocab, encode, segment_word, Casing, EncodedSequence, Vocabulary};
pub use trainer::{evaluate, train, TrainConfig, TrainReport};
