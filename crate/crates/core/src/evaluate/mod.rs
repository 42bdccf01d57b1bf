//! Scoring against ground truth: accuracy, transition error, open-class
//! detection and ablation studies.

pub mod metrics;
pub mod ood;
pub mod study;

pub use metrics::{accuracy, bayes_inversion, candidate_coverage, run_metrics, transition_error, RunMetrics};
pub use ood::{f1_sweep, F1Curve, OodSplit};
pub use study::{run_study, StudyRow, StudySpec};
