use serde::{Deserialize, Serialize};

use super::heads::{head_deltas, head_logits, pad_base_logits, roi_features};
use super::model::{HeadKind, ImageFeatures, Model, Stage};
use super::rpn::{model_proposals, ProposalConfig, Proposals, RpnStrategy};
use crate::error::{Error, Result};
use crate::ops::{decode_box, nms, softmax, BBox};
use crate::synthgen::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub proposals: ProposalConfig,
    pub rpn_strategy: RpnStrategy,
    /// Candidates below this probability never reach NMS.
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_dets: usize,
    /// Added to the NMS ranking score of base-head candidates.
    pub base_bonus: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            proposals: ProposalConfig::default(),
            rpn_strategy: RpnStrategy::Max,
            score_thresh: 0.05,
            nms_thresh: 0.5,
            max_dets: 20,
            base_bonus: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: ClassId,
    /// Probability from the emitting head, without any ranking bonus.
    pub score: f64,
    pub source_head: HeadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectOutput {
    pub proposals: Proposals,
    pub detections: Vec<Detection>,
}

struct Candidate {
    det: Detection,
    rank: f64,
}

impl Model {
    pub fn detect(&self, pixels: &[f64], cfg: &DetectConfig) -> Result<Vec<Detection>> {
        Ok(self.detect_features(&self.features(pixels)?, cfg)?.detections)
    }

    /// Full inference from cached features.
    ///
    /// Both heads score every proposal. Base-head probabilities come from the
    /// zero-padded logits; the novel head contributes every foreground class
    /// it predicts, base classes included. Candidates above `score_thresh`
    /// are merged, base-head ones ranked with `base_bonus`, and suppressed
    /// class by class.
    pub fn detect_features(&self, feats: &ImageFeatures, cfg: &DetectConfig) -> Result<DetectOutput> {
        if self.stage() == Stage::Untrained {
            return Err(Error::State("detect called on an untrained model".into()));
        }
        let proposals = model_proposals(feats, self, cfg.rpn_strategy, &cfg.proposals)?;
        let x = roi_features(&feats.feat, &proposals.boxes, self)?;
        let side = self.arch().image_side as f64;
        let split = self.split();
        let mut cands: Vec<Candidate> = Vec::new();

        let mut emit = |head: HeadKind, probs: &crate::Tensor, classes: &[ClassId], deltas: &crate::Tensor, bonus: f64| -> Result<()> {
            for (i, anchor) in proposals.boxes.iter().enumerate() {
                let p = probs.row(i);
                let bbox = decode_box(deltas.row(i), anchor, Some((side, side)))?;
                for (j, &class_id) in classes.iter().enumerate() {
                    if p[j] >= cfg.score_thresh {
                        cands.push(Candidate {
                            det: Detection { bbox, class_id, score: p[j], source_head: head },
                            rank: p[j] + bonus,
                        });
                    }
                }
            }
            Ok(())
        };

        let logits_b = pad_base_logits(&head_logits(&x, self, HeadKind::Base)?, split.num_novel())?;
        let probs_b = softmax(&logits_b)?;
        emit(HeadKind::Base, &probs_b, split.base_ids(), &head_deltas(&x, self, HeadKind::Base)?, cfg.base_bonus)?;

        if let Some(spec) = self.novel_head() {
            let probs_n = softmax(&head_logits(&x, self, HeadKind::Novel)?)?;
            let classes = spec.class_ids(split);
            emit(HeadKind::Novel, &probs_n, &classes, &head_deltas(&x, self, HeadKind::Novel)?, 0.0)?;
        }

        Ok(DetectOutput {
            proposals,
            detections: classwise_nms(cands, cfg),
        })
    }
}

fn classwise_nms(cands: Vec<Candidate>, cfg: &DetectConfig) -> Vec<Detection> {
    let mut classes: Vec<ClassId> = cands.iter().map(|c| c.det.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut kept: Vec<usize> = Vec::new();
    for c in classes {
        let idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].det.class_id == c).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&i| cands[i].det.bbox).collect();
        let ranks: Vec<f64> = idx.iter().map(|&i| cands[i].rank).collect();
        kept.extend(nms(&boxes, &ranks, cfg.nms_thresh).into_iter().map(|k| idx[k]));
    }
    kept.sort_by(|&a, &b| cands[b].rank.total_cmp(&cands[a].rank).then(a.cmp(&b)));
    kept.truncate(cfg.max_dets);
    let mut cands: Vec<Option<Candidate>> = cands.into_iter().map(Some).collect();
    kept.into_iter()
        .map(|i| cands[i].take().expect("each candidate kept once").det)
        .collect()
}
