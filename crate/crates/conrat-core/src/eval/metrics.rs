//! Token-level rationale metrics and the concept-to-aspect matching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::error::{Error, Result};

/// Precision, recall, and F1 between two token sets. Inputs are treated as
/// sets; duplicates are ignored. Empty prediction gives P = 0, empty gold
/// gives R = 0, and F1 is 0 whenever P + R = 0.
pub fn token_prf(pred: &[usize], gold: &[usize]) -> (f64, f64, f64) {
    let mut p: Vec<usize> = pred.to_vec();
    let mut g: Vec<usize> = gold.to_vec();
    p.sort_unstable();
    p.dedup();
    g.sort_unstable();
    g.dedup();
    let mut inter = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    prf_from_counts(inter, p.len(), g.len())
}

/// P/R/F1 from intersection, prediction, and gold token counts.
pub fn prf_from_counts(inter: usize, pred: usize, gold: usize) -> (f64, f64, f64) {
    let p = if pred == 0 { 0.0 } else { inter as f64 / pred as f64 };
    let r = if gold == 0 { 0.0 } else { inter as f64 / gold as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Maximum-weight one-to-one assignment of concepts (rows) to aspects
/// (columns). Requires at least as many concepts as aspects; every aspect is
/// assigned, surplus concepts map to `None`. Ties resolve deterministically:
/// scanning concepts in order, the lowest feasible aspect index wins over
/// higher ones and over leaving the concept unassigned.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Result<Vec<Option<usize>>> {
    let k = weights.len();
    let a = weights.first().map_or(0, Vec::len);
    if a == 0 {
        return Err(Error::DegenerateInput("no aspects to assign".into()));
    }
    if weights.iter().any(|row| row.len() != a) {
        return Err(Error::Shape("ragged weight matrix".into()));
    }
    if k < a {
        return Err(Error::InvalidParameter(format!(
            "{k} concepts cannot cover {a} aspects one-to-one"
        )));
    }
    if a > 20 {
        return Err(Error::InvalidParameter(format!(
            "{a} aspects exceed the assignment solver limit of 20"
        )));
    }
    if weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::InvalidParameter(
            "assignment weights must be finite".into(),
        ));
    }

    // dp[i][s] = best total weight assigning aspect set s using concepts i..
    let full = (1usize << a) - 1;
    let mut dp = vec![vec![f64::NEG_INFINITY; full + 1]; k + 1];
    dp[k][0] = 0.0;
    for i in (0..k).rev() {
        for s in 0..=full {
            let mut best = dp[i + 1][s];
            for aspect in 0..a {
                let bit = 1usize << aspect;
                if s & bit != 0 {
                    let v = weights[i][aspect] + dp[i + 1][s ^ bit];
                    if v > best {
                        best = v;
                    }
                }
            }
            dp[i][s] = best;
        }
    }

    let mut out = vec![None; k];
    let mut s = full;
    for i in 0..k {
        let target = dp[i][s];
        let mut chosen = None;
        for aspect in 0..a {
            let bit = 1usize << aspect;
            if s & bit != 0 && weights[i][aspect] + dp[i + 1][s ^ bit] == target {
                chosen = Some(aspect);
                break;
            }
        }
        if let Some(aspect) = chosen {
            out[i] = Some(aspect);
            s ^= 1usize << aspect;
        }
    }
    debug_assert_eq!(s, 0, "every aspect assigned");
    Ok(out)
}

/// A fitted concept-to-aspect matching plus the score matrix it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Aspect names in sorted order; columns of `mean_f1`.
    pub aspects: Vec<String>,
    /// Mean per-document F1 of concept k against aspect a, K rows.
    pub mean_f1: Vec<Vec<f64>>,
    /// Concept index -> position in `aspects`, `None` for surplus concepts.
    pub concept_to_aspect: Vec<Option<usize>>,
}

impl Assignment {
    /// Concept assigned to the named aspect, if any.
    pub fn concept_for(&self, aspect: &str) -> Option<usize> {
        let col = self.aspects.iter().position(|a| a == aspect)?;
        self.concept_to_aspect.iter().position(|m| *m == Some(col))
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_to_aspect.len()
    }

    /// Aspect name -> assigned concept index.
    pub fn as_map(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, m) in self.concept_to_aspect.iter().enumerate() {
            if let Some(col) = m {
                out.insert(self.aspects[*col].clone(), k);
            }
        }
        out
    }

    pub fn unassigned(&self) -> Vec<usize> {
        self.concept_to_aspect
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(k, _)| k)
            .collect()
    }
}

/// Sorted union of aspect names annotated anywhere in `docs`.
pub fn annotated_aspects(docs: &[Document]) -> Vec<String> {
    let mut names: Vec<String> = docs
        .iter()
        .flat_map(|d| d.annotations.keys().cloned())
        .collect();
    names.sort_unstable();
    names.dedup();
    names
}

/// Fit the matching from per-document concept predictions: for every
/// (concept, aspect) pair, the mean per-document F1 over documents annotated
/// with that aspect, then the maximum-weight one-to-one assignment.
pub fn fit_assignment(
    docs: &[Document],
    predictions: &[Vec<Vec<usize>>],
    num_concepts: usize,
) -> Result<Assignment> {
    if docs.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} documents but {} prediction rows",
            docs.len(),
            predictions.len()
        )));
    }
    let aspects = annotated_aspects(docs);
    if aspects.is_empty() {
        return Err(Error::DegenerateInput(
            "assignment needs annotated documents".into(),
        ));
    }
    if num_concepts < aspects.len() {
        return Err(Error::InvalidParameter(format!(
            "{num_concepts} concepts cannot cover {} aspects",
            aspects.len()
        )));
    }
    let mut sums = vec![vec![0.0f64; aspects.len()]; num_concepts];
    let mut counts = vec![0usize; aspects.len()];
    for (doc, pred) in docs.iter().zip(predictions) {
        if pred.len() != num_concepts {
            return Err(Error::Shape(format!(
                "prediction row has {} concepts, expected {num_concepts}",
                pred.len()
            )));
        }
        for (col, name) in aspects.iter().enumerate() {
            let Some(spans) = doc.annotations.get(name) else {
                continue;
            };
            let gold = span_tokens(spans);
            counts[col] += 1;
            for (k, tokens) in pred.iter().enumerate() {
                let (_, _, f1) = token_prf(tokens, &gold);
                sums[k][col] += f1;
            }
        }
    }
    let mean_f1: Vec<Vec<f64>> = sums
        .into_iter()
        .map(|row| {
            row.into_iter()
                .zip(&counts)
                .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                .collect()
        })
        .collect();
    let concept_to_aspect = max_weight_assignment(&mean_f1)?;
    Ok(Assignment {
        aspects,
        mean_f1,
        concept_to_aspect,
    })
}

/// Expand inclusive spans into the token indices they cover.
pub fn span_tokens(spans: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    for &(s, e) in spans {
        out.extend(s..=e);
    }
    out.sort_unstable();
    out.dedup();
    out
}
