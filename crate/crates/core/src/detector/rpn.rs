use serde::{Deserialize, Serialize};

use super::model::{closed_set, HeadKind, ImageFeatures, Model};
use super::params::layers;
use crate::error::{param, Error, Result};
use crate::ops::{decode_box, dot, nms, sigmoid, AnchorGrid, BBox};
use crate::tensor::Tensor;

/// How base and finetuned objectness maps are ensembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RpnStrategy {
    Max,
    ArithAvg,
    GeoAvg,
    BaseOnly,
}

closed_set!(
    RpnStrategy, "rpn strategy",
    "max" => RpnStrategy::Max,
    "arith-avg" => RpnStrategy::ArithAvg,
    "geo-avg" => RpnStrategy::GeoAvg,
    "base-only" => RpnStrategy::BaseOnly,
);

impl RpnStrategy {
    pub const ALL: [RpnStrategy; 4] = [Self::Max, Self::ArithAvg, Self::GeoAvg, Self::BaseOnly];
}

/// Per-anchor objectness logits of one head.
pub fn objectness_logits(hidden: &Tensor, model: &Model, head: HeadKind) -> Result<Vec<f64>> {
    let layer = match head {
        HeadKind::Base => layers::RPN_OBJ_B,
        HeadKind::Novel => layers::RPN_OBJ_N,
    };
    if head == HeadKind::Novel && !model.is_retentive() {
        return Err(Error::State("a base detector has no finetuned objectness head".into()));
    }
    let w = model.params.weight(layer)?;
    let b = model.params.bias(layer).expect("objectness layers have a bias");
    let s = w.rows();
    let mut out = Vec::with_capacity(hidden.rows() * s);
    for c in 0..hidden.rows() {
        let h = hidden.row(c);
        for k in 0..s {
            out.push(b.data()[k] + dot(w.row(k), h));
        }
    }
    Ok(out)
}

/// Objectness (sigmoid) of the selected head and the shared box deltas.
pub fn rpn_forward(feats: &ImageFeatures, model: &Model, head: HeadKind) -> Result<(Vec<f64>, Tensor)> {
    let obj = objectness_logits(&feats.hidden, model, head)?
        .into_iter()
        .map(sigmoid)
        .collect();
    Ok((obj, rpn_deltas(&feats.hidden, model)?))
}

/// `A x 4` deltas from the regression layer shared by both objectness heads.
pub fn rpn_deltas(hidden: &Tensor, model: &Model) -> Result<Tensor> {
    let w = model.params.weight(layers::RPN_BOX)?;
    let b = model.params.bias(layers::RPN_BOX).expect("rpn_box has a bias");
    let s = w.rows() / 4;
    let mut out = Vec::with_capacity(hidden.rows() * s * 4);
    for c in 0..hidden.rows() {
        let h = hidden.row(c);
        for r in 0..4 * s {
            out.push(b.data()[r] + dot(w.row(r), h));
        }
    }
    Tensor::new(vec![hidden.rows() * s, 4], out)
}

/// Elementwise ensemble of the base and finetuned objectness maps.
pub fn bias_balanced_objectness(o_b: &[f64], o_n: &[f64], strategy: RpnStrategy) -> Result<Vec<f64>> {
    if o_b.len() != o_n.len() {
        return param(format!("objectness maps differ in length: {} vs {}", o_b.len(), o_n.len()));
    }
    let f: fn(f64, f64) -> f64 = match strategy {
        RpnStrategy::Max => f64::max,
        RpnStrategy::ArithAvg => |a, b| 0.5 * (a + b),
        RpnStrategy::GeoAvg => |a, b| (a * b).sqrt(),
        RpnStrategy::BaseOnly => |a, _| a,
    };
    Ok(o_b.iter().zip(o_n).map(|(&a, &b)| f(a, b)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub pre_nms_k: usize,
    pub nms_thresh: f64,
    pub post_nms_k: usize,
    /// Decoded boxes narrower or shorter than this (pixels) are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            pre_nms_k: 256,
            nms_thresh: 0.7,
            post_nms_k: 64,
            min_size: 1.0,
        }
    }
}

/// Proposal boxes with the objectness that selected them, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Proposals {
    pub boxes: Vec<BBox>,
    pub objectness: Vec<f64>,
}

impl Proposals {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Top-k by objectness (ties to the lower anchor index), decode, clip, drop
/// tiny boxes, NMS, keep the best `post_nms_k`.
pub fn propose(
    objectness: &[f64],
    deltas: &Tensor,
    anchors: &AnchorGrid,
    image_side: f64,
    cfg: &ProposalConfig,
) -> Result<Proposals> {
    if objectness.len() != anchors.len() || deltas.rows() != anchors.len() {
        return param("objectness, deltas and anchors are not aligned");
    }
    let mut order: Vec<usize> = (0..objectness.len()).collect();
    order.sort_by(|&a, &b| objectness[b].total_cmp(&objectness[a]).then(a.cmp(&b)));
    order.truncate(cfg.pre_nms_k);
    let mut boxes = Vec::with_capacity(order.len());
    let mut scores = Vec::with_capacity(order.len());
    for &i in &order {
        let b = decode_box(deltas.row(i), &anchors.boxes[i], Some((image_side, image_side)))?;
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    let keep = nms(&boxes, &scores, cfg.nms_thresh);
    let keep = &keep[..keep.len().min(cfg.post_nms_k)];
    Ok(Proposals {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        objectness: keep.iter().map(|&i| scores[i]).collect(),
    })
}

/// Proposals of a model under an ensembling strategy. Base detectors always
/// use their own objectness.
pub fn model_proposals(
    feats: &ImageFeatures,
    model: &Model,
    strategy: RpnStrategy,
    cfg: &ProposalConfig,
) -> Result<Proposals> {
    let (o_b, deltas) = rpn_forward(feats, model, HeadKind::Base)?;
    let obj = if model.is_retentive() && strategy != RpnStrategy::BaseOnly {
        let (o_n, _) = rpn_forward(feats, model, HeadKind::Novel)?;
        bias_balanced_objectness(&o_b, &o_n, strategy)?
    } else {
        o_b
    };
    propose(&obj, &deltas, model.anchors(), model.arch().image_side as f64, cfg)
}
