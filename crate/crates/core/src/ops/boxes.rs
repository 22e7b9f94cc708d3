use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2 && self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression.
///
/// Candidates are visited by descending score with ties broken by lower index;
/// a candidate is dropped when its IoU with an already kept box exceeds
/// `iou_thresh`. The returned indices are in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Encodes `b` relative to `anchor` as center offsets over anchor size and log
/// size ratios.
pub fn encode_box(b: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return param(format!("degenerate anchor {anchor:?}"));
    }
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return param(format!("cannot encode degenerate box {b:?}"));
    }
    let (xa, ya) = anchor.center();
    let (x, y) = b.center();
    Ok([(x - xa) / wa, (y - ya) / ha, (w / wa).ln(), (h / ha).ln()])
}

/// Inverse of [`encode_box`]. When `bounds` is given the result is clipped to
/// `[0, w] x [0, h]`.
pub fn decode_box(deltas: &[f64], anchor: &BBox, bounds: Option<(f64, f64)>) -> Result<BBox> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return param(format!("degenerate anchor {anchor:?}"));
    }
    if deltas.len() != 4 {
        return param(format!("expected 4 deltas, got {}", deltas.len()));
    }
    let (xa, ya) = anchor.center();
    let x = xa + deltas[0] * wa;
    let y = ya + deltas[1] * ha;
    let w = wa * deltas[2].min(MAX_LOG_SCALE).exp();
    let h = ha * deltas[3].min(MAX_LOG_SCALE).exp();
    let b = BBox::new(x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h);
    Ok(match bounds {
        Some((bw, bh)) => b.clip(bw, bh),
        None => b,
    })
}
