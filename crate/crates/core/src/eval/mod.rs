//! Detection metrics: all-points AP, candidate recall and ROI feature norms.

mod ap;
mod norms;
mod recall;
mod report;

pub use ap::{ap_summary, average_precision, iou_thresholds, match_detections, ApSummary, ClassAp, ClassGroup};
pub use norms::{roi_feature_norms, roi_feature_norms_with, ClassNorm, FeatureNorms};
pub use recall::{average_recall, mean_recall, Candidate, ClassFilter};
pub use report::{
    detection_candidates, emit_report, evaluate, evaluate_with, metrics_csv, norms_svg, proposal_candidates,
    report_json, run_inference, EvalReport, RecallAtK, RecallBlock, RunMeta, REPORT_SCHEMA_VERSION,
};
