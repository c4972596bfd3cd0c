//! Evaluation: token-level rationale metrics, concept-to-aspect matching,
//! metric reports, ablation runs, and HTML rendering.

pub mod ablation;
pub mod html;
pub mod metrics;
pub mod report;

pub use ablation::{ablation_table, run_ablation, AblationRow, AblationSwitch};
pub use html::render_html;
pub use metrics::{max_weight_assignment, token_prf, Assignment};
pub use report::{
    assign_concepts_to_aspects, evaluate, export_study_samples, predict_concepts,
    AspectMetrics, MetricReport, StudySample, METRIC_SCHEMA_VERSION,
};
