//! Deterministic prediction, inference-time concept pruning, and rationale
//! extraction.
//!
//! Pruning scores each concept by how much its windows overlap everyone
//! else's across a validation set, then keeps the k least-overlapping
//! concepts. A pruned prediction forces presence to 1 on kept concepts and 0
//! on the rest; the selector is bypassed entirely.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::model::forward::{forward, BatchInput, ForwardOptions};
use crate::model::{ConRATParams, ModelOutput};

/// Outcome of overlap scoring and concept selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Mean overlap ratio of each concept against all others, over documents.
    pub scores: Vec<f64>,
    /// Kept concept indices, ascending.
    pub kept: Vec<usize>,
    /// Number of kept concepts.
    pub k: usize,
}

impl PruneReport {
    pub fn keeps(&self, concept: usize) -> bool {
        self.kept.binary_search(&concept).is_ok()
    }
}

/// One extracted concept span of a rationale. Token positions are 1-indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRationale {
    pub concept: usize,
    pub start: usize,
    pub end: usize,
    pub presence: f64,
    /// Signed margin alpha_k * (P_k[1] - P_k[0]).
    pub contribution: f64,
}

/// Explanation of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub concepts: Vec<ConceptRationale>,
    pub predicted_label: u8,
    /// Probability of the predicted class.
    pub predicted_prob: f64,
}

/// Mean overlap ratio per concept over a stream of mask sets. The ratio for a
/// pair is |intersection| / ell; a concept's score averages over the other
/// K - 1 concepts and all documents.
pub fn overlap_scores_from_masks(sets: &[MaskSet]) -> Result<Vec<f64>> {
    let Some(first) = sets.first() else {
        return Err(Error::InvalidParameter(
            "overlap scoring needs at least one document".into(),
        ));
    };
    let k = first.num_concepts();
    let ell = first.ell;
    for (i, s) in sets.iter().enumerate() {
        if s.num_concepts() != k || s.ell != ell {
            return Err(Error::Shape(format!(
                "mask set {i} has {} concepts of length {}, expected {k} of {ell}",
                s.num_concepts(),
                s.ell
            )));
        }
    }
    if k == 1 {
        return Ok(vec![0.0]);
    }
    let mut sums = vec![0.0f64; k];
    for set in sets {
        for k1 in 0..k {
            let (s1, e1) = set.span(k1);
            for k2 in (k1 + 1)..k {
                let (s2, e2) = set.span(k2);
                let inter = e1.min(e2) as i64 - s1.max(s2) as i64 + 1;
                if inter > 0 {
                    let ratio = inter as f64 / ell as f64;
                    sums[k1] += ratio;
                    sums[k2] += ratio;
                }
            }
        }
    }
    let denom = (sets.len() * (k - 1)) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

/// Run eval-mode mask generation over the validation documents and score each
/// concept. The returned report keeps every concept (pruning disabled).
pub fn compute_overlap_scores(
    params: &ConRATParams,
    val_docs: &[Vec<usize>],
    batch_size: usize,
) -> Result<PruneReport> {
    if val_docs.is_empty() {
        return Err(Error::InvalidParameter(
            "overlap scoring needs a non-empty validation set".into(),
        ));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let mut sets = Vec::with_capacity(val_docs.len());
    for chunk in val_docs.chunks(batch_size) {
        let batch = BatchInput::new(chunk.to_vec(), vec![0; chunk.len()])?;
        let r = forward(params, &batch, &ForwardOptions::default())?;
        sets.extend(r.masks);
    }
    let scores = overlap_scores_from_masks(&sets)?;
    let k = scores.len();
    Ok(PruneReport {
        scores,
        kept: (0..k).collect(),
        k,
    })
}

/// Keep the k lowest-scored concepts; equal scores fall to the lower index.
pub fn prune(scores: &[f64], k: usize) -> Result<PruneReport> {
    if scores.is_empty() {
        return Err(Error::InvalidParameter("no concepts to prune".into()));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::Bounds {
            what: "kept concept count",
            value: k,
            min: 1,
            max: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("overlap scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    Ok(PruneReport {
        scores: scores.to_vec(),
        kept,
        k,
    })
}

/// Deterministic forward pass for one document plus its rationale. With a
/// prune report, presence becomes 1 on kept concepts and 0 elsewhere; without
/// one, presence comes from the selector threshold. The rationale lists only
/// concepts that survive pruning.
pub fn explain(
    params: &ConRATParams,
    doc: &[usize],
    report: Option<&PruneReport>,
) -> Result<(Rationale, ModelOutput)> {
    let k_total = params.dims.num_concepts;
    let forced: Option<Vec<f64>> = report.map(|r| {
        (0..k_total)
            .map(|k| if r.keeps(k) { 1.0 } else { 0.0 })
            .collect()
    });
    if let Some(r) = report {
        if let Some(&bad) = r.kept.iter().find(|&&c| c >= k_total) {
            return Err(Error::Bounds {
                what: "kept concept index",
                value: bad,
                min: 0,
                max: k_total - 1,
            });
        }
    }
    let batch = BatchInput::new(vec![doc.to_vec()], vec![0])?;
    let opts = ForwardOptions {
        force_presence: forced.as_deref(),
        ..ForwardOptions::default()
    };
    let result = forward(params, &batch, &opts)?;
    let output = result.doc_output(0);

    let label = output.predicted_class();
    let predicted_prob = output.log_probs[label as usize].exp();
    let mut concepts = Vec::new();
    for k in 0..k_total {
        if let Some(r) = report {
            if !r.keeps(k) {
                continue;
            }
        }
        let (s, e) = output.masks.span(k);
        concepts.push(ConceptRationale {
            concept: k,
            start: s + 1,
            end: e + 1,
            presence: output.presence[(k, 0)],
            contribution: alpha_margin(params, &output, k),
        });
    }
    Ok((
        Rationale {
            concepts,
            predicted_label: label,
            predicted_prob,
        },
        output,
    ))
}

fn alpha_margin(params: &ConRATParams, output: &ModelOutput, k: usize) -> f64 {
    params.alpha[(0, k)] * (output.concept_logits[(k, 1)] - output.concept_logits[(k, 0)])
}

/// Presence row for a forced-presence pass: 1 on kept concepts, 0 elsewhere.
pub fn forced_presence(report: &PruneReport, k_total: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, k_total), |(_, k)| {
        if report.keeps(k) {
            1.0
        } else {
            0.0
        }
    })
}
