//! Metric reports: accuracy plus per-aspect token precision/recall/F1 under
//! a fitted concept-to-aspect assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::metrics::{fit_assignment, prf_from_counts, span_tokens, Assignment};
use crate::inference::{overlap_scores_from_masks, PruneReport};
use crate::masking::MaskSet;
use crate::model::forward::{forward, BatchInput, ForwardOptions};
use crate::model::ConRATParams;

pub const METRIC_SCHEMA_VERSION: u32 = 1;

/// Deterministic per-document model output reduced to what metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPrediction {
    pub masks: MaskSet,
    /// Eval-mode presence per concept, after any prune forcing.
    pub present: Vec<bool>,
    pub predicted: u8,
}

impl ConceptPrediction {
    /// Tokens the concept effectively claims: its window when present,
    /// nothing otherwise.
    pub fn effective_tokens(&self, k: usize) -> Vec<usize> {
        if self.present[k] {
            self.masks.covered(k)
        } else {
            Vec::new()
        }
    }
}

/// Run the deterministic pass over every document. With a prune report,
/// presence is forced to 1 on kept concepts and 0 on the rest.
pub fn predict_concepts(
    params: &ConRATParams,
    docs: &[Vec<usize>],
    prune: Option<&PruneReport>,
    batch_size: usize,
) -> Result<Vec<ConceptPrediction>> {
    if docs.is_empty() {
        return Err(Error::DegenerateInput("no documents to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    let k_total = params.dims.num_concepts;
    let forced: Option<Vec<f64>> = match prune {
        Some(r) => {
            if let Some(&bad) = r.kept.iter().find(|&&c| c >= k_total) {
                return Err(Error::Bounds {
                    what: "kept concept index",
                    value: bad,
                    min: 0,
                    max: k_total - 1,
                });
            }
            Some(
                (0..k_total)
                    .map(|k| if r.keeps(k) { 1.0 } else { 0.0 })
                    .collect(),
            )
        }
        None => None,
    };
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(batch_size) {
        let batch = BatchInput::new(chunk.to_vec(), vec![0; chunk.len()])?;
        let opts = ForwardOptions {
            force_presence: forced.as_deref(),
            ..ForwardOptions::default()
        };
        let r = forward(params, &batch, &opts)?;
        for b in 0..chunk.len() {
            let o = r.doc_output(b);
            let present = (0..k_total).map(|k| o.presence[(k, 0)] > 0.5).collect();
            let predicted = o.predicted_class();
            out.push(ConceptPrediction {
                masks: o.masks,
                present,
                predicted,
            });
        }
    }
    Ok(out)
}

/// Fit the concept-to-aspect matching on a validation set using effective
/// (presence-gated) concept tokens.
pub fn assign_concepts_to_aspects(
    params: &ConRATParams,
    docs: &[Document],
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<Assignment> {
    let annotated: Vec<&Document> = docs.iter().filter(|d| !d.annotations.is_empty()).collect();
    if annotated.is_empty() {
        return Err(Error::DegenerateInput(
            "assignment needs annotated documents".into(),
        ));
    }
    let encoded: Vec<Vec<usize>> = annotated.iter().map(|d| vocab.encode(&d.tokens)).collect();
    let preds = predict_concepts(params, &encoded, None, batch_size)?;
    let k_total = params.dims.num_concepts;
    let rows: Vec<Vec<Vec<usize>>> = preds
        .iter()
        .map(|p| (0..k_total).map(|k| p.effective_tokens(k)).collect())
        .collect();
    let owned: Vec<Document> = annotated.into_iter().cloned().collect();
    fit_assignment(&owned, &rows, k_total)
}

/// Metrics for one aspect, micro-aggregated over its annotated documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Documents carrying an annotation for this aspect.
    pub docs: usize,
}

/// One evaluation run. All metric fields lie in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: u32,
    pub accuracy: f64,
    pub num_docs: usize,
    pub annotated_docs: usize,
    /// Aspect name -> token metrics under the assigned concept.
    pub aspects: BTreeMap<String, AspectMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Aspect name -> concept index.
    pub assignment: BTreeMap<String, usize>,
    pub unassigned_concepts: Vec<usize>,
    /// Mean pairwise window overlap per concept.
    pub overlap_scores: Vec<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {v} escapes [0, 1]"
                )));
            }
            Ok(())
        };
        unit("accuracy", self.accuracy)?;
        unit("macro_precision", self.macro_precision)?;
        unit("macro_recall", self.macro_recall)?;
        unit("macro_f1", self.macro_f1)?;
        for (name, m) in &self.aspects {
            unit(&format!("{name}.precision"), m.precision)?;
            unit(&format!("{name}.recall"), m.recall)?;
            unit(&format!("{name}.f1"), m.f1)?;
            let (p, r) = (m.precision, m.recall);
            let expect = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            if (m.f1 - expect).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "{name}.f1 = {} disagrees with P/R",
                    m.f1
                )));
            }
        }
        Ok(())
    }

    /// Fixed-width console table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "accuracy {:.4} over {} documents ({} annotated)\n",
            self.accuracy, self.num_docs, self.annotated_docs
        ));
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>6} {:>8}\n",
            "aspect", "P", "R", "F1", "docs", "concept"
        ));
        for (name, m) in &self.aspects {
            let concept = self
                .assignment
                .get(name)
                .map_or("-".to_string(), ToString::to_string);
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>8}\n",
                name, m.precision, m.recall, m.f1, m.docs, concept
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8.4} {:>8.4} {:>8.4}\n",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        ));
        if !self.unassigned_concepts.is_empty() {
            out.push_str(&format!(
                "unassigned concepts: {:?}\n",
                self.unassigned_concepts
            ));
        }
        if !self.overlap_scores.is_empty() {
            let scores: Vec<String> = self
                .overlap_scores
                .iter()
                .map(|s| format!("{s:.4}"))
                .collect();
            out.push_str(&format!("overlap scores: [{}]\n", scores.join(", ")));
        }
        out
    }
}

/// Compute the report from already-materialized predictions. Accuracy covers
/// every document; token metrics cover documents annotated with each aspect,
/// micro-aggregated (corpus-level counts), then macro-averaged over aspects.
pub fn report_from_predictions(
    docs: &[Document],
    preds: &[ConceptPrediction],
    assignment: &Assignment,
) -> Result<MetricReport> {
    if docs.is_empty() {
        return Err(Error::DegenerateInput("no documents to evaluate".into()));
    }
    if docs.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} documents but {} predictions",
            docs.len(),
            preds.len()
        )));
    }
    let k_total = preds[0].present.len();
    if assignment.num_concepts() != k_total {
        return Err(Error::Shape(format!(
            "assignment covers {} concepts, model has {k_total}",
            assignment.num_concepts()
        )));
    }
    if assignment
        .concept_to_aspect
        .iter()
        .flatten()
        .any(|&col| col >= assignment.aspects.len())
    {
        return Err(Error::InvalidParameter(
            "assignment references an unknown aspect column".into(),
        ));
    }

    let correct = docs
        .iter()
        .zip(preds)
        .filter(|(d, p)| d.label == p.predicted)
        .count();
    let accuracy = correct as f64 / docs.len() as f64;
    let annotated_docs = docs.iter().filter(|d| !d.annotations.is_empty()).count();

    let mut aspects = BTreeMap::new();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for (col, name) in assignment.aspects.iter().enumerate() {
        let concept = assignment
            .concept_to_aspect
            .iter()
            .position(|m| *m == Some(col));
        let (mut inter, mut pred_n, mut gold_n, mut support) = (0usize, 0usize, 0usize, 0usize);
        for (doc, p) in docs.iter().zip(preds) {
            let Some(spans) = doc.annotations.get(name) else {
                continue;
            };
            support += 1;
            let gold = span_tokens(spans);
            gold_n += gold.len();
            if let Some(k) = concept {
                let tokens = p.effective_tokens(k);
                pred_n += tokens.len();
                inter += tokens.iter().filter(|t| gold.binary_search(t).is_ok()).count();
            }
        }
        let (p, r, f1) = prf_from_counts(inter, pred_n, gold_n);
        mp += p;
        mr += r;
        mf += f1;
        aspects.insert(
            name.clone(),
            AspectMetrics {
                precision: p,
                recall: r,
                f1,
                docs: support,
            },
        );
    }
    let a = assignment.aspects.len().max(1) as f64;

    let sets: Vec<MaskSet> = preds.iter().map(|p| p.masks.clone()).collect();
    let overlap_scores = overlap_scores_from_masks(&sets)?;

    let report = MetricReport {
        schema: METRIC_SCHEMA_VERSION,
        accuracy,
        num_docs: docs.len(),
        annotated_docs,
        aspects,
        macro_precision: mp / a,
        macro_recall: mr / a,
        macro_f1: mf / a,
        assignment: assignment.as_map(),
        unassigned_concepts: assignment.unassigned(),
        overlap_scores,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluate a trained model on a document set under a fitted assignment.
/// With a prune report, dropped concepts contribute nothing and kept ones
/// are always present.
pub fn evaluate(
    params: &ConRATParams,
    docs: &[Document],
    vocab: &Vocabulary,
    assignment: &Assignment,
    prune: Option<&PruneReport>,
    batch_size: usize,
) -> Result<MetricReport> {
    let encoded: Vec<Vec<usize>> = docs.iter().map(|d| vocab.encode(&d.tokens)).collect();
    let preds = predict_concepts(params, &encoded, prune, batch_size)?;
    report_from_predictions(docs, &preds, assignment)
}

/// One sample for a blind quality study: the concept texts shown without the
/// document label, plus the hidden fields a grader reveals afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudySample {
    pub doc_index: usize,
    /// Concept index -> its extracted text, present concepts only.
    pub concepts: BTreeMap<usize, String>,
    pub hidden_label: u8,
    pub hidden_prediction: u8,
}

/// Export evaluation-ready samples: present concepts' span text with the
/// label and prediction held out for later reveal.
pub fn export_study_samples(
    params: &ConRATParams,
    docs: &[Document],
    vocab: &Vocabulary,
    prune: Option<&PruneReport>,
    batch_size: usize,
) -> Result<Vec<StudySample>> {
    let encoded: Vec<Vec<usize>> = docs.iter().map(|d| vocab.encode(&d.tokens)).collect();
    let preds = predict_concepts(params, &encoded, prune, batch_size)?;
    let mut out = Vec::with_capacity(docs.len());
    for (i, (doc, p)) in docs.iter().zip(&preds).enumerate() {
        let mut concepts = BTreeMap::new();
        for k in 0..p.present.len() {
            let tokens = p.effective_tokens(k);
            if tokens.is_empty() {
                continue;
            }
            let text: Vec<&str> = tokens.iter().map(|&t| doc.tokens[t].as_str()).collect();
            concepts.insert(k, text.join(" "));
        }
        out.push(StudySample {
            doc_index: i,
            concepts,
            hidden_label: doc.label,
            hidden_prediction: p.predicted,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::inference::prune;

    fn synthetic_docs(n: usize, aspects: usize, seed: u64) -> (Vec<Document>, Vocabulary) {
        let cfg = SyntheticConfig {
            num_docs: n,
            num_aspects: aspects,
            chunk_len: 4,
            max_len: 36,
            seed,
            ..SyntheticConfig::default()
        };
        let docs = generate_synthetic(&cfg).unwrap();
        let vocab = Vocabulary::build(docs.iter().map(|d| d.tokens.as_slice()), 12);
        (docs, vocab)
    }

    fn oracle_predictions(docs: &[Document], ell: usize) -> Vec<ConceptPrediction> {
        // Masks placed exactly on the gold chunks, aspects in sorted order.
        docs.iter()
            .map(|d| {
                let t = d.tokens.len();
                let starts: Vec<usize> =
                    d.annotations.values().map(|spans| spans[0].0).collect();
                let masks = crate::masking::build_masks(&starts, ell, t).unwrap();
                ConceptPrediction {
                    masks,
                    present: vec![true; starts.len()],
                    predicted: d.label,
                }
            })
            .collect()
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let (docs, _) = synthetic_docs(40, 3, 5);
        let preds = oracle_predictions(&docs, 4);
        let rows: Vec<Vec<Vec<usize>>> = preds
            .iter()
            .map(|p| (0..3).map(|k| p.effective_tokens(k)).collect())
            .collect();
        let assignment = fit_assignment(&docs, &rows, 3).unwrap();
        let report = report_from_predictions(&docs, &preds, &assignment).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_precision, 1.0);
        assert_eq!(report.macro_recall, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.aspects.len(), 3);
        for m in report.aspects.values() {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
            assert_eq!(m.docs, docs.len());
        }
        assert_eq!(report.schema, METRIC_SCHEMA_VERSION);
        assert!(report.unassigned_concepts.is_empty());
        assert_eq!(report.overlap_scores, vec![0.0; 3]);
    }

    #[test]
    fn absent_concept_zeroes_its_aspect() {
        let (docs, _) = synthetic_docs(20, 2, 6);
        let mut preds = oracle_predictions(&docs, 4);
        let rows: Vec<Vec<Vec<usize>>> = preds
            .iter()
            .map(|p| (0..2).map(|k| p.effective_tokens(k)).collect())
            .collect();
        let assignment = fit_assignment(&docs, &rows, 2).unwrap();
        // Kill whichever concept serves the first aspect.
        let first = assignment.aspects[0].clone();
        let dead = assignment.concept_for(&first).unwrap();
        for p in &mut preds {
            p.present[dead] = false;
        }
        let report = report_from_predictions(&docs, &preds, &assignment).unwrap();
        let m = &report.aspects[&first];
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        let other = &report.aspects[&assignment.aspects[1].clone()];
        assert_eq!(other.f1, 1.0);
        assert!((report.macro_f1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_json_roundtrips_and_validates() {
        let (docs, _) = synthetic_docs(10, 2, 7);
        let preds = oracle_predictions(&docs, 4);
        let rows: Vec<Vec<Vec<usize>>> = preds
            .iter()
            .map(|p| (0..2).map(|k| p.effective_tokens(k)).collect())
            .collect();
        let assignment = fit_assignment(&docs, &rows, 2).unwrap();
        let report = report_from_predictions(&docs, &preds, &assignment).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(json.contains("\"schema\":1"));
        back.validate().unwrap();

        let mut broken = report.clone();
        broken.accuracy = 1.5;
        assert!(broken.validate().is_err());
        let mut broken = report;
        broken.macro_f1 = -0.1;
        assert!(broken.validate().is_err());
    }

    #[test]
    fn evaluate_runs_end_to_end_and_is_deterministic() {
        use crate::data::embeddings::random_embeddings;
        use crate::model::ConRATParams;
        let (docs, vocab) = synthetic_docs(24, 2, 8);
        let emb = random_embeddings(&vocab, 2);
        let dims = crate::model::ModelDims {
            vocab: emb.nrows(),
            embed: emb.ncols(),
            hidden: 6,
            num_concepts: 2,
            chunk_len: 4,
            selector_cnn: false,
        };
        let params = ConRATParams::init(dims, emb, 9).unwrap();
        let assignment =
            assign_concepts_to_aspects(&params, &docs, &vocab, 8).unwrap();
        let a = evaluate(&params, &docs, &vocab, &assignment, None, 8).unwrap();
        let b = evaluate(&params, &docs, &vocab, &assignment, None, 5).unwrap();
        assert_eq!(a, b, "batch size leaked into metrics");
        a.validate().unwrap();
        assert!(!a.to_table().is_empty());

        // Pruning to one concept forces the other aspect's metrics to 0.
        let report = prune(&a.overlap_scores, 1).unwrap();
        let pruned = evaluate(&params, &docs, &vocab, &assignment, Some(&report), 8).unwrap();
        let dropped: Vec<String> = assignment
            .as_map()
            .into_iter()
            .filter(|(_, k)| !report.keeps(*k))
            .map(|(a, _)| a)
            .collect();
        for name in dropped {
            assert_eq!(pruned.aspects[&name].f1, 0.0);
        }
    }

    #[test]
    fn study_samples_hide_nothing_but_the_label() {
        let (docs, vocab) = synthetic_docs(12, 2, 10);
        let preds = oracle_predictions(&docs, 4);
        let _ = preds;
        use crate::data::embeddings::random_embeddings;
        let emb = random_embeddings(&vocab, 3);
        let dims = crate::model::ModelDims {
            vocab: emb.nrows(),
            embed: emb.ncols(),
            hidden: 5,
            num_concepts: 2,
            chunk_len: 4,
            selector_cnn: false,
        };
        let params = ConRATParams::init(dims, emb, 4).unwrap();
        let samples = export_study_samples(&params, &docs, &vocab, None, 6).unwrap();
        assert_eq!(samples.len(), docs.len());
        for (s, d) in samples.iter().zip(&docs) {
            assert_eq!(s.hidden_label, d.label);
            for text in s.concepts.values() {
                // Span text is made of real document tokens.
                for w in text.split(' ') {
                    assert!(d.tokens.iter().any(|t| t == w), "alien token {w}");
                }
            }
        }
        let json = serde_json::to_string(&samples[0]).unwrap();
        assert!(json.contains("hidden_label"));
    }
}
