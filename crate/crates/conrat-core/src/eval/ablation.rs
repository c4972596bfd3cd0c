//! Ablation runs: retrain with one ingredient disabled, same seed and data,
//! and report the metric table.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::report::{assign_concepts_to_aspects, evaluate, MetricReport};
use crate::inference::PruneReport;
use crate::training::teacher::TeacherParams;
use crate::training::trainer::train;
use crate::training::TrainConfig;

/// One ingredient to disable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSwitch {
    /// Overlap penalty off.
    Overlap,
    /// Diversity penalty off.
    Div,
    /// Presence fixed to 1 for every concept.
    Selector,
    /// Distillation off.
    Teacher,
}

impl AblationSwitch {
    pub const ALL: [AblationSwitch; 4] = [
        AblationSwitch::Overlap,
        AblationSwitch::Div,
        AblationSwitch::Selector,
        AblationSwitch::Teacher,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationSwitch::Overlap => "no_overlap",
            AblationSwitch::Div => "no_div",
            AblationSwitch::Selector => "no_selector",
            AblationSwitch::Teacher => "no_teacher",
        }
    }

    /// Rewrite the config for this row.
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            AblationSwitch::Overlap => cfg.lambda_overlap = 0.0,
            AblationSwitch::Div => cfg.lambda_div = 0.0,
            AblationSwitch::Selector => cfg.selector_fixed = true,
            AblationSwitch::Teacher => cfg.lambda_distill = 0.0,
        }
    }
}

impl std::str::FromStr for AblationSwitch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(AblationSwitch::Overlap),
            "div" => Ok(AblationSwitch::Div),
            "selector" => Ok(AblationSwitch::Selector),
            "teacher" => Ok(AblationSwitch::Teacher),
            other => Err(Error::InvalidParameter(format!(
                "unknown ablation switch {other:?} (expected overlap, div, selector or teacher)"
            ))),
        }
    }
}

/// One trained variant and its evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// "full" or the switch label.
    pub label: String,
    pub dev_accuracy: f64,
    pub report: MetricReport,
}

/// Render rows as a fixed-width table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<14} {:>10} {:>10} {:>10} {:>10}\n",
        "variant", "accuracy", "macro_P", "macro_R", "macro_F1"
    );
    for row in rows {
        out.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            row.label,
            row.report.accuracy,
            row.report.macro_precision,
            row.report.macro_recall,
            row.report.macro_f1
        ));
    }
    out
}

fn encode(docs: &[Document], vocab: &Vocabulary) -> Vec<(Vec<usize>, usize)> {
    docs.iter()
        .map(|d| (vocab.encode(&d.tokens), d.label as usize))
        .collect()
}

/// Train the full model plus one variant per switch (identical seed and
/// data), fit the assignment on the validation split, and evaluate on the
/// test split. The teacher is required when the base config distills.
pub fn run_ablation(
    base: &TrainConfig,
    train_docs: &[Document],
    val_docs: &[Document],
    test_docs: &[Document],
    vocab: &Vocabulary,
    embedding: &Array2<f64>,
    teacher: Option<&TeacherParams>,
    switches: &[AblationSwitch],
) -> Result<Vec<AblationRow>> {
    for (i, s) in switches.iter().enumerate() {
        if switches[..i].contains(s) {
            return Err(Error::InvalidParameter(format!(
                "duplicate ablation switch {:?}",
                s.label()
            )));
        }
    }
    let train_enc = encode(train_docs, vocab);
    let val_enc = encode(val_docs, vocab);
    let mut rows = Vec::with_capacity(switches.len() + 1);
    let variants =
        std::iter::once(None).chain(switches.iter().copied().map(Some));
    for switch in variants {
        let mut cfg = base.clone();
        let label = match switch {
            Some(s) => {
                s.apply(&mut cfg);
                s.label().to_string()
            }
            None => "full".to_string(),
        };
        let row_teacher = if cfg.lambda_distill > 0.0 { teacher } else { None };
        let outcome = train(
            &cfg,
            &train_enc,
            &val_enc,
            embedding.clone(),
            row_teacher,
            None,
        )?;
        // A selector-free variant stays selector-free at evaluation: a
        // keep-all prune report forces presence to 1 everywhere.
        let keep_all = PruneReport {
            scores: vec![0.0; cfg.num_concepts],
            kept: (0..cfg.num_concepts).collect(),
            k: cfg.num_concepts,
        };
        let prune = cfg.selector_fixed.then_some(&keep_all);
        let assignment =
            assign_with_prune(&outcome.params, val_docs, vocab, cfg.batch_size, prune)?;
        let report = evaluate(
            &outcome.params,
            test_docs,
            vocab,
            &assignment,
            prune,
            cfg.batch_size,
        )?;
        rows.push(AblationRow {
            label,
            dev_accuracy: outcome.best_dev_accuracy,
            report,
        });
    }
    Ok(rows)
}

fn assign_with_prune(
    params: &crate::model::ConRATParams,
    docs: &[Document],
    vocab: &Vocabulary,
    batch_size: usize,
    prune: Option<&PruneReport>,
) -> Result<crate::eval::metrics::Assignment> {
    match prune {
        None => assign_concepts_to_aspects(params, docs, vocab, batch_size),
        Some(report) => {
            use crate::eval::metrics::fit_assignment;
            use crate::eval::report::predict_concepts;
            let annotated: Vec<Document> = docs
                .iter()
                .filter(|d| !d.annotations.is_empty())
                .cloned()
                .collect();
            if annotated.is_empty() {
                return Err(Error::DegenerateInput(
                    "assignment needs annotated documents".into(),
                ));
            }
            let encoded: Vec<Vec<usize>> =
                annotated.iter().map(|d| vocab.encode(&d.tokens)).collect();
            let preds = predict_concepts(params, &encoded, Some(report), batch_size)?;
            let k_total = params.dims.num_concepts;
            let rows: Vec<Vec<Vec<usize>>> = preds
                .iter()
                .map(|p| (0..k_total).map(|k| p.effective_tokens(k)).collect())
                .collect();
            fit_assignment(&annotated, &rows, k_total)
        }
    }
}
