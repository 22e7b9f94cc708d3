use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::ops::iou;
use crate::synthgen::{ClassId, ClassSplit, GroundTruth};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// True-positive flags of one class's detections in ranking order, plus the
/// number of ground-truth instances of that class.
///
/// Detections are ranked by score, ties kept in (image, index) order. Each
/// detection claims the unmatched ground truth it overlaps most, if that
/// overlap reaches `iou_thresh`.
pub fn match_detections(dets: &[Vec<Detection>], gts: &[GroundTruth], class_id: ClassId, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(im, d)| d.iter().map(move |d| (im, d)))
        .filter(|(_, d)| d.class_id == class_id)
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().flat_map(|g| &g.labels).filter(|&&l| l == class_id).count();
    let flags = ranked
        .into_iter()
        .map(|(im, d)| {
            let g = &gts[im];
            let mut best: Option<(f64, usize)> = None;
            for j in 0..g.len() {
                if g.labels[j] != class_id || taken[im][j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.boxes[j]);
                if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            if let Some((_, j)) = best {
                taken[im][j] = true;
            }
            best.is_some()
        })
        .collect();
    (flags, num_gt)
}

/// All-points average precision of one class: the area under the
/// precision-recall curve after taking the running-maximum precision
/// envelope from the right. `None` when the class has no ground truth.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[GroundTruth], class_id: ClassId, iou_thresh: f64) -> Option<f64> {
    let (tp, num_gt) = match_detections(dets, gts, class_id, iou_thresh);
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let ap = tp
        .iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .fold(0.0, |acc, (_, p)| acc + p)
        / num_gt as f64;
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassGroup {
    Base,
    Novel,
}

impl ClassGroup {
    pub fn of(split: &ClassSplit, c: ClassId) -> Self {
        if split.is_novel(c) {
            ClassGroup::Novel
        } else {
            ClassGroup::Base
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassGroup::Base => "base",
            ClassGroup::Novel => "novel",
        }
    }
}

/// AP of one class at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub group: ClassGroup,
    pub iou: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: Option<f64>,
    pub bap: Option<f64>,
    pub nap: Option<f64>,
}

/// Unweighted class means within each group at every threshold, then the
/// mean over thresholds. Classes without a value are skipped; a group with
/// no values at all is `None`.
pub fn ap_summary(per_class: &[ClassAp], split: &ClassSplit) -> ApSummary {
    let mut thresholds: Vec<f64> = per_class.iter().map(|c| c.iou).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let group_mean = |keep: &dyn Fn(ClassId) -> bool| -> Option<f64> {
        let per_thr: Vec<f64> = thresholds
            .iter()
            .filter_map(|&t| {
                let mut vals: Vec<(ClassId, f64)> = per_class
                    .iter()
                    .filter(|c| c.iou == t && keep(c.class_id))
                    .filter_map(|c| c.ap.map(|a| (c.class_id, a)))
                    .collect();
                vals.sort_by_key(|v| v.0);
                let vals: Vec<f64> = vals.into_iter().map(|v| v.1).collect();
                (!vals.is_empty()).then(|| vals.iter().fold(0.0, |a, v| a + v) / vals.len() as f64)
            })
            .collect();
        (!per_thr.is_empty()).then(|| per_thr.iter().fold(0.0, |a, v| a + v) / per_thr.len() as f64)
    };
    ApSummary {
        ap: group_mean(&|_| true),
        bap: group_mean(&|c| split.is_base(c)),
        nap: group_mean(&|c| split.is_novel(c)),
    }
}
