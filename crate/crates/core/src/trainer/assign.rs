use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::ops::{iou, BBox};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    Rpn,
    Roi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetLabel {
    /// Matched to the ground truth with this index.
    Positive(usize),
    /// Non-object (RPN) or background (ROI).
    Negative,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub labels: Vec<TargetLabel>,
    /// Indices chosen for the loss, in ascending order.
    pub sampled: Vec<usize>,
}

/// Labels candidates against ground truth and subsamples them.
///
/// RPN mode: IoU ≥ `rpn_pos` is positive, ≤ `rpn_neg` negative, the rest
/// ignored; each ground truth's best-overlapping anchors are forced positive.
/// ROI mode: IoU ≥ `roi_pos` is positive, everything else background.
/// Positives are sampled up to the configured fraction and negatives fill the
/// remainder.
pub fn assign_targets(cands: &[BBox], gts: &[BBox], mode: AssignMode, cfg: &TrainConfig, seed: u64) -> Assignment {
    let mut best = vec![(0.0f64, 0usize); cands.len()];
    let mut gt_best = vec![0.0f64; gts.len()];
    for (i, c) in cands.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(c, g);
            if v > best[i].0 {
                best[i] = (v, j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut labels: Vec<TargetLabel> = best
        .iter()
        .map(|&(v, j)| match mode {
            AssignMode::Rpn if v >= cfg.iou.rpn_pos => TargetLabel::Positive(j),
            AssignMode::Rpn if v <= cfg.iou.rpn_neg => TargetLabel::Negative,
            AssignMode::Rpn => TargetLabel::Ignored,
            AssignMode::Roi if v >= cfg.iou.roi_pos => TargetLabel::Positive(j),
            AssignMode::Roi => TargetLabel::Negative,
        })
        .collect();
    if mode == AssignMode::Rpn {
        for (j, g) in gts.iter().enumerate() {
            if gt_best[j] <= 0.0 {
                continue;
            }
            for (i, c) in cands.iter().enumerate() {
                if iou(c, g) == gt_best[j] && !matches!(labels[i], TargetLabel::Positive(_)) {
                    labels[i] = TargetLabel::Positive(j);
                }
            }
        }
    }

    let (count, frac) = match mode {
        AssignMode::Rpn => (cfg.rpn_sample.anchors, cfg.rpn_sample.positive_fraction),
        AssignMode::Roi => (cfg.roi_sample.per_image, cfg.roi_sample.positive_fraction),
    };
    let mut rng = stream_rng(seed, streams::SAMPLING, mode as u64);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| matches!(labels[i], TargetLabel::Positive(_))).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == TargetLabel::Negative).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate((count as f64 * frac).floor() as usize);
    neg.truncate(count - pos.len());
    let mut sampled: Vec<usize> = pos.into_iter().chain(neg).collect();
    sampled.sort_unstable();
    Assignment { labels, sampled }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox { x1, y1, x2, y2 }
    }

    #[test]
    fn identical_anchor_is_positive() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let a = assign_targets(&[g], &[g], AssignMode::Rpn, &TrainConfig::default(), 0);
        assert_eq!(a.labels, vec![TargetLabel::Positive(0)]);
        assert_eq!(a.sampled, vec![0]);
    }

    #[test]
    fn no_ground_truth_gives_all_negative() {
        let cands: Vec<BBox> = (0..100).map(|i| b(i as f64, 0.0, i as f64 + 5.0, 5.0)).collect();
        let cfg = TrainConfig::default();
        for mode in [AssignMode::Rpn, AssignMode::Roi] {
            let a = assign_targets(&cands, &[], mode, &cfg, 3);
            assert!(a.labels.iter().all(|l| *l == TargetLabel::Negative));
            let want = if mode == AssignMode::Rpn { 64 } else { 32 };
            assert_eq!(a.sampled.len(), want);
        }
    }

    /// Rule-by-rule scalar oracle on three anchors and one ground truth.
    #[test]
    fn three_anchor_case_follows_rules() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let anchors = [b(0.0, 0.0, 10.0, 12.0), b(0.0, 0.0, 10.0, 20.0), b(20.0, 20.0, 30.0, 30.0)];
        let cfg = TrainConfig::default();
        let ious: Vec<f64> = anchors.iter().map(|a| iou(a, &g)).collect();
        assert!(ious[0] > 0.7 && (0.3..0.7).contains(&ious[1]) && ious[2] == 0.0);
        let oracle = |v: f64, best: bool| {
            if v >= 0.7 || best {
                TargetLabel::Positive(0)
            } else if v <= 0.3 {
                TargetLabel::Negative
            } else {
                TargetLabel::Ignored
            }
        };
        let top = ious.iter().cloned().fold(0.0, f64::max);
        let want: Vec<TargetLabel> = ious.iter().map(|&v| oracle(v, v == top)).collect();
        assert_eq!(assign_targets(&anchors, &[g], AssignMode::Rpn, &cfg, 1).labels, want);

        // forced positive: the best anchor is only at IoU 0.5
        let weak = [b(0.0, 0.0, 10.0, 20.0), b(20.0, 20.0, 30.0, 30.0)];
        let a = assign_targets(&weak, &[g], AssignMode::Rpn, &cfg, 1);
        assert_eq!(a.labels, vec![TargetLabel::Positive(0), TargetLabel::Negative]);

        let roi = assign_targets(&anchors, &[g], AssignMode::Roi, &cfg, 1);
        assert_eq!(roi.labels, vec![TargetLabel::Positive(0), TargetLabel::Positive(0), TargetLabel::Negative]);
    }

    #[test]
    fn sampling_respects_counts_and_fraction() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        let mut cands = vec![g; 40];
        cands.extend((0..200).map(|i| b(20.0 + i as f64, 20.0, 30.0 + i as f64, 30.0)));
        let cfg = TrainConfig::default();
        let a = assign_targets(&cands, &[g], AssignMode::Roi, &cfg, 5);
        let npos = a.sampled.iter().filter(|&&i| i < 40).count();
        assert_eq!(npos, 8);
        assert_eq!(a.sampled.len(), 32);
        assert_eq!(a, assign_targets(&cands, &[g], AssignMode::Roi, &cfg, 5));
        assert_ne!(a.sampled, assign_targets(&cands, &[g], AssignMode::Roi, &cfg, 6).sampled);
    }
}
