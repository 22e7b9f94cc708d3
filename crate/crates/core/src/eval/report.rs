use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ap::{ap_summary, average_precision, iou_thresholds, ApSummary, ClassAp, ClassGroup};
use super::norms::{roi_feature_norms_with, FeatureNorms};
use super::recall::{mean_recall, Candidate, ClassFilter};
use crate::detector::{DetectConfig, DetectOutput, ImageFeatures, Model};
use crate::error::Result;
use crate::synthgen::{Dataset, GroundTruth};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Recall at the two candidate budgets, averaged over IoU 0.50:0.95.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub at_10: Option<f64>,
    pub at_100: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallBlock {
    pub all: RecallAtK,
    pub seen: RecallAtK,
    pub unseen: RecallAtK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub model_digest: String,
    pub dataset_digest: String,
    pub config_digest: String,
    /// Ablation settings and other run labels.
    pub settings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub meta: RunMeta,
    pub per_class: Vec<ClassAp>,
    pub summary: ApSummary,
    pub summary_50: ApSummary,
    pub proposals: RecallBlock,
    pub detections: RecallBlock,
    pub norms: FeatureNorms,
}

/// Per-image inference outputs of a model on a dataset.
pub fn run_inference(model: &Model, feats: &[ImageFeatures], cfg: &DetectConfig) -> Result<Vec<DetectOutput>> {
    feats.par_iter().map(|f| model.detect_features(f, cfg)).collect()
}

fn recall_block(cands: &[Vec<Candidate>], gts: &[GroundTruth], model: &Model) -> RecallBlock {
    let at = |f| RecallAtK {
        at_10: mean_recall(cands, gts, model.split(), 10, f),
        at_100: mean_recall(cands, gts, model.split(), 100, f),
    };
    RecallBlock {
        all: at(ClassFilter::All),
        seen: at(ClassFilter::Seen),
        unseen: at(ClassFilter::Unseen),
    }
}

pub fn proposal_candidates(outs: &[DetectOutput]) -> Vec<Vec<Candidate>> {
    outs.iter()
        .map(|o| {
            o.proposals
                .boxes
                .iter()
                .zip(&o.proposals.objectness)
                .map(|(&bbox, &score)| Candidate { bbox, score })
                .collect()
        })
        .collect()
}

pub fn detection_candidates(outs: &[DetectOutput]) -> Vec<Vec<Candidate>> {
    outs.iter()
        .map(|o| o.detections.iter().map(|d| Candidate { bbox: d.bbox, score: d.score }).collect())
        .collect()
}

/// Scores a model on a dataset from precomputed image features.
pub fn evaluate_with(model: &Model, ds: &Dataset, feats: &[ImageFeatures], cfg: &DetectConfig, meta: RunMeta) -> Result<EvalReport> {
    let outs = run_inference(model, feats, cfg)?;
    let gts: Vec<GroundTruth> = ds.manifest.items.iter().map(|r| r.gt.clone()).collect();
    let dets: Vec<Vec<_>> = outs.iter().map(|o| o.detections.clone()).collect();
    let split = model.split();
    let mut per_class = Vec::new();
    for c in split.canonical_ids() {
        for t in iou_thresholds() {
            per_class.push(ClassAp {
                class_id: c,
                group: ClassGroup::of(split, c),
                iou: t,
                ap: average_precision(&dets, &gts, c, t),
            });
        }
    }
    per_class.sort_by_key(|r| r.class_id);
    let at_50: Vec<ClassAp> = per_class.iter().filter(|r| r.iou == 0.5).cloned().collect();
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        meta,
        summary: ap_summary(&per_class, split),
        summary_50: ap_summary(&at_50, split),
        proposals: recall_block(&proposal_candidates(&outs), &gts, model),
        detections: recall_block(&detection_candidates(&outs), &gts, model),
        norms: roi_feature_norms_with(model, ds, feats)?,
        per_class,
    })
}

pub fn evaluate(model: &Model, ds: &Dataset, cfg: &DetectConfig, meta: RunMeta) -> Result<EvalReport> {
    let feats: Vec<ImageFeatures> = ds.images.par_iter().map(|im| model.features(&im.pixels)).collect::<Result<_>>()?;
    evaluate_with(model, ds, &feats, cfg, meta)
}

/// Canonical JSON with lexicographically sorted keys.
pub fn report_json(report: &EvalReport) -> Result<String> {
    let v: serde_json::Value = serde_json::to_value(report)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut s = String::from("class_id,group,iou,ap\n");
    for r in &report.per_class {
        let ap = r.ap.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{:.2},{}\n", r.class_id, r.group.as_str(), r.iou, ap));
    }
    s
}

/// Bar chart of per-class mean ROI feature norms, seen classes in blue and
/// unseen ones in orange.
pub fn norms_svg(norms: &FeatureNorms) -> String {
    let (bar, gap, h, pad) = (28.0, 8.0, 200.0, 40.0);
    let n = norms.per_class.len() as f64;
    let width = pad * 2.0 + n * (bar + gap);
    let top = norms
        .per_class
        .iter()
        .filter_map(|c| c.mean_norm)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" viewBox=\"0 0 {width} {}\">\n",
        h + 2.0 * pad,
        h + 2.0 * pad
    );
    s.push_str(&format!(
        "  <line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = pad + h,
        x2 = width - pad
    ));
    for (i, c) in norms.per_class.iter().enumerate() {
        let v = c.mean_norm.unwrap_or(0.0);
        let bh = h * v / top;
        let x = pad + i as f64 * (bar + gap);
        let fill = if c.seen { "#1f77b4" } else { "#ff7f0e" };
        s.push_str(&format!(
            "  <rect class=\"bar\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar}\" height=\"{bh:.2}\" fill=\"{fill}\"><title>class {} {:.4}</title></rect>\n",
            pad + h - bh,
            c.class_id,
            v
        ));
        s.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + bar / 2.0,
            pad + h + 14.0,
            c.class_id
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.json`, `metrics.csv` and `norms.svg` into `dir`.
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), report_json(report)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(report))?;
    fs::write(dir.join("norms.svg"), norms_svg(&report.norms))?;
    Ok(())
}
