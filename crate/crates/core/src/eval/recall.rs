use serde::{Deserialize, Serialize};

use crate::ops::{iou, BBox};
use crate::synthgen::{ClassId, ClassSplit, GroundTruth};

/// Which ground-truth instances a recall figure counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassFilter {
    /// Annotated instances of base classes.
    Seen,
    /// Instances never shown to the base detector: unannotated ones and
    /// those of novel classes.
    Unseen,
    All,
}

impl ClassFilter {
    pub fn keeps(self, split: &ClassSplit, label: ClassId, annotated: bool) -> bool {
        let unseen = !annotated || split.is_novel(label);
        match self {
            ClassFilter::Seen => !unseen,
            ClassFilter::Unseen => unseen,
            ClassFilter::All => true,
        }
    }
}

/// A scored, class-agnostic box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub score: f64,
}

/// Fraction of filtered ground-truth instances overlapped at `iou_thresh` by
/// at least one of the `k` best-scoring candidates of their image. `None`
/// when the filter keeps no instance.
pub fn average_recall(
    cands: &[Vec<Candidate>],
    gts: &[GroundTruth],
    split: &ClassSplit,
    k: usize,
    iou_thresh: f64,
    filter: ClassFilter,
) -> Option<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for (c, g) in cands.iter().zip(gts) {
        let mut order: Vec<usize> = (0..c.len()).collect();
        order.sort_by(|&a, &b| c[b].score.total_cmp(&c[a].score).then(a.cmp(&b)));
        order.truncate(k);
        for j in 0..g.len() {
            if !filter.keeps(split, g.labels[j], g.annotated[j]) {
                continue;
            }
            total += 1;
            if order.iter().any(|&i| iou(&c[i].bbox, &g.boxes[j]) >= iou_thresh) {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// `average_recall` averaged over IoU thresholds 0.50:0.05:0.95.
pub fn mean_recall(cands: &[Vec<Candidate>], gts: &[GroundTruth], split: &ClassSplit, k: usize, filter: ClassFilter) -> Option<f64> {
    let vals: Option<Vec<f64>> = super::iou_thresholds()
        .into_iter()
        .map(|t| average_recall(cands, gts, split, k, t, filter))
        .collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, s: f64) -> BBox {
        BBox { x1: x, y1: y, x2: x + s, y2: y + s }
    }

    fn split() -> ClassSplit {
        ClassSplit::new(2, vec![ClassId(0)], vec![ClassId(1)]).unwrap()
    }

    fn gts() -> Vec<GroundTruth> {
        vec![
            GroundTruth {
                boxes: vec![bx(0.0, 0.0, 10.0), bx(20.0, 20.0, 10.0)],
                labels: vec![ClassId(0), ClassId(1)],
                annotated: vec![true, true],
            },
            GroundTruth {
                boxes: vec![bx(5.0, 5.0, 8.0)],
                labels: vec![ClassId(0)],
                annotated: vec![false],
            },
        ]
    }

    #[test]
    fn exact_candidates_give_full_recall_and_none_give_zero() {
        let g = gts();
        let c: Vec<Vec<Candidate>> = g
            .iter()
            .map(|g| g.boxes.iter().map(|&bbox| Candidate { bbox, score: 1.0 }).collect())
            .collect();
        for f in [ClassFilter::Seen, ClassFilter::Unseen, ClassFilter::All] {
            assert_eq!(average_recall(&c, &g, &split(), 100, 0.5, f), Some(1.0));
            assert_eq!(average_recall(&[vec![], vec![]], &g, &split(), 100, 0.5, f), Some(0.0));
        }
    }

    #[test]
    fn filters_and_top_k() {
        let g = gts();
        let c = vec![
            vec![Candidate { bbox: bx(20.0, 20.0, 10.0), score: 0.9 }, Candidate { bbox: bx(0.0, 0.0, 10.0), score: 0.1 }],
            vec![],
        ];
        let s = split();
        assert_eq!(average_recall(&c, &g, &s, 1, 0.5, ClassFilter::Unseen), Some(0.5));
        assert_eq!(average_recall(&c, &g, &s, 1, 0.5, ClassFilter::Seen), Some(0.0));
        assert_eq!(average_recall(&c, &g, &s, 2, 0.5, ClassFilter::Seen), Some(1.0));
        let only_seen = vec![g[0].clone()];
        let none = GroundTruth {
            boxes: vec![only_seen[0].boxes[0]],
            labels: vec![ClassId(0)],
            annotated: vec![true],
        };
        assert_eq!(average_recall(&c[..1], &[none], &s, 2, 0.5, ClassFilter::Unseen), None);
    }
}
