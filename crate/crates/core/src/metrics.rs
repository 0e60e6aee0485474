//! Confusion matrix and precision/recall/F1 with per-class, macro, and
//! weighted averaging.
//!
//! Class 1 (causal) is the positive class. Zero denominators yield 0, not NaN,
//! matching common evaluation tooling. The headline metric reported elsewhere
//! in the crate is the weighted-average F1; per-class and macro values are
//! always computed alongside so any averaging scheme can be compared.

use serde::Serialize;

use crate::error::{Error, Result};

/// Binary confusion counts with class 1 as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Support (gold count) per class, indexed by label.
    pub fn supports(&self) -> [usize; 2] {
        [self.tn + self.fp, self.tp + self.fn_]
    }
}

/// Precision/recall/F1 plus support for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

/// Full evaluation report: both classes plus macro and weighted aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub class_0: ClassMetrics,
    pub class_1: ClassMetrics,
    #[serde(rename = "macro")]
    pub macro_avg: ClassMetrics,
    #[serde(rename = "weighted")]
    pub weighted_avg: ClassMetrics,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics report serializes")
    }
}

/// Count the confusion matrix of binary predictions against gold labels.
pub fn confusion(preds: &[u8], golds: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::shape(format!(
            "prediction/gold length mismatch: {} vs {}",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &g) in preds.iter().zip(golds) {
        debug_assert!(p <= 1 && g <= 1);
        match (p, g) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            _ => cm.tn += 1,
        }
    }
    Ok(cm)
}

// P = tp/(tp+fp), R = tp/(tp+fn), F1 = 2PR/(P+R); zero denominators -> 0.
fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-class precision/recall/F1 with macro and support-weighted aggregates.
///
/// Class 0 is scored symmetrically, with tn playing the role of its true
/// positives. `supports` must match the gold counts implied by the matrix.
pub fn precision_recall_f1(cm: &ConfusionMatrix, supports: [usize; 2]) -> Result<MetricsReport> {
    if supports != cm.supports() {
        return Err(Error::config(format!(
            "supports {:?} inconsistent with confusion matrix {:?}",
            supports,
            cm.supports()
        )));
    }
    let (p1, r1, f1_1) = prf(cm.tp, cm.fp, cm.fn_);
    // For class 0: predicted-0 & gold-0 = tn, predicted-0 & gold-1 = fn, predicted-1 & gold-0 = fp.
    let (p0, r0, f1_0) = prf(cm.tn, cm.fn_, cm.fp);
    let total = supports[0] + supports[1];

    let class_0 = ClassMetrics {
        p: p0,
        r: r0,
        f1: f1_0,
        support: supports[0],
    };
    let class_1 = ClassMetrics {
        p: p1,
        r: r1,
        f1: f1_1,
        support: supports[1],
    };
    let macro_avg = ClassMetrics {
        p: (p0 + p1) / 2.0,
        r: (r0 + r1) / 2.0,
        f1: (f1_0 + f1_1) / 2.0,
        support: total,
    };
    let w = |v0: f64, v1: f64| {
        (v0 * supports[0] as f64 + v1 * supports[1] as f64) / total as f64
    };
    let weighted_avg = ClassMetrics {
        p: w(p0, p1),
        r: w(r0, r1),
        f1: w(f1_0, f1_1),
        support: total,
    };
    Ok(MetricsReport {
        class_0,
        class_1,
        macro_avg,
        weighted_avg,
    })
}

/// confusion + precision_recall_f1 in one call, deriving supports from the matrix.
pub fn score(preds: &[u8], golds: &[u8]) -> Result<MetricsReport> {
    let cm = confusion(preds, golds)?;
    precision_recall_f1(&cm, cm.supports())
}
