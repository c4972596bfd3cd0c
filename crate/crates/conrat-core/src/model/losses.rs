//! Regularizers and the joint loss, on plain values.
//!
//! The training graph re-creates these formulas node-by-node; the value
//! versions here are the reference used for reporting and by the per-document
//! entry points.

use ndarray::Array2;

use crate::model::{LossParts, LossWeights};

/// `|| M M^T - ell*I ||_F^2` over concept mask rows (hard or straight-through
/// values). Zero exactly when rows are pairwise disjoint and each row carries
/// `ell` ones.
pub fn overlap_loss(masks: &Array2<f64>, ell: usize) -> f64 {
    let k = masks.nrows();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            let inner: f64 = masks.row(a).dot(&masks.row(b));
            let target = if a == b { ell as f64 } else { 0.0 };
            let dev = inner - target;
            total += dev * dev;
        }
    }
    total
}

/// Mean cosine similarity over ordered concept pairs; rows with zero norm
/// contribute zero. K < 2 has no pairs and scores 0.
pub fn diversity_loss(h: &Array2<f64>) -> f64 {
    let k = h.nrows();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            total += cosine(&h.row(a).to_vec(), &h.row(b).to_vec());
        }
    }
    total / (k * (k - 1)) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na > 0.0 && nb > 0.0 {
        dot / (na * nb)
    } else {
        0.0
    }
}

/// Cross-entropy of one document from class log-probabilities.
pub fn cross_entropy(log_probs: &[f64; 2], label: u8) -> f64 {
    -log_probs[label as usize]
}

/// Squared gap between teacher and student positive-class probabilities.
pub fn distill_gap(teacher_prob: f64, student_prob: f64) -> f64 {
    let d = teacher_prob - student_prob;
    d * d
}

/// Combine components into the weighted total.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.total(weights)
}

/// Numerically stable log-softmax of a length-2 logit pair.
pub fn log_softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let lse = ((logits[0] - m).exp() + (logits[1] - m).exp()).ln() + m;
    [logits[0] - lse, logits[1] - lse]
}
