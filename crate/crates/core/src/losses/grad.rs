use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::consistency::{consistency_row, ConsistencyVariant};
use super::supervised::{
    smooth_l1_sum_grad, supervised_detection_losses, total_finetune_loss, LossBreakdown, SupervisedInputs,
};
use crate::detector::params::{bias_name, weight_name};
use crate::detector::{
    head_deltas, head_logits, layers, pad_base_logits, ClassifierKind, HeadDomain, HeadKind, Model,
};
use crate::error::{param, Error, Result};
use crate::ops::{dot, norm, sigmoid, softmax_row, COSINE_EPS};
use crate::synthgen::ClassId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

impl TrainStage {
    pub fn trainable_layers(self) -> &'static [&'static str] {
        match self {
            TrainStage::Pretrain => &layers::PRETRAIN_TRAINABLE,
            TrainStage::Finetune => &layers::FINETUNE_TRAINABLE,
        }
    }
}

/// A sampled anchor: the mixer activations of its cell and its scale slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub hidden: Vec<f64>,
    pub scale: usize,
    pub positive: bool,
    pub target: Option<[f64; 4]>,
}

/// A sampled ROI: its frozen projected feature and assigned target.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub feature: Vec<f64>,
    /// `None` is background.
    pub label: Option<ClassId>,
    pub target: Option<[f64; 4]>,
}

/// Sampled targets of one optimisation step, pooled over its images. The
/// loss is a smooth function of the trainable layers given a minibatch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Minibatch {
    pub anchors: Vec<AnchorSample>,
    pub rois: Vec<RoiSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    /// `None` switches the consistency term off.
    #[serde(with = "super::consistency::setting_serde")]
    pub consistency: Option<ConsistencyVariant>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            consistency: Some(ConsistencyVariant::Kldiv),
        }
    }
}

/// Gradients of the trainable arrays, keyed by array name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub grads: BTreeMap<String, Tensor>,
}

impl GradientSet {
    fn for_layers(model: &Model, layer_names: &[&str]) -> Result<Self> {
        let mut grads = BTreeMap::new();
        for l in layer_names {
            for name in [weight_name(l), bias_name(l)] {
                if let Some(p) = model.params.get(&name) {
                    grads.insert(name, Tensor::zeros(p.value.shape().to_vec()));
                }
            }
        }
        Ok(Self { grads })
    }

    fn w(&mut self, layer: &str) -> &mut Tensor {
        self.grads.get_mut(&weight_name(layer)).expect("weight gradient allocated")
    }

    fn b(&mut self, layer: &str) -> Option<&mut [f64]> {
        self.grads.get_mut(&bias_name(layer)).map(|t| t.data_mut())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Column a ROI label maps to in the trained classification head.
fn label_column(model: &Model, stage: TrainStage, label: Option<ClassId>) -> usize {
    let split = model.split();
    match stage {
        TrainStage::Pretrain => label.and_then(|c| split.base_index(c)).unwrap_or(split.num_base()),
        TrainStage::Finetune => match model.novel_head().expect("finetune needs novel heads").domain {
            HeadDomain::All => label.and_then(|c| split.canonical_index(c)).unwrap_or(split.num_classes()),
            HeadDomain::NovelOnly => label.and_then(|c| split.novel_index(c)).unwrap_or(split.num_novel()),
        },
    }
}

fn check_stage(model: &Model, stage: TrainStage) -> Result<()> {
    match (stage, model.is_retentive()) {
        (TrainStage::Pretrain, true) => Err(Error::State("pretraining a model that already has novel heads".into())),
        (TrainStage::Finetune, false) => Err(Error::State("finetuning needs a model with novel heads".into())),
        _ => Ok(()),
    }
}

/// Loss of `mb` under the stage objective.
pub fn minibatch_loss(model: &Model, mb: &Minibatch, stage: TrainStage, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(evaluate(model, mb, stage, cfg, false)?.0)
}

/// Loss and exact gradients with respect to the stage's trainable layers.
pub fn compute_gradients(
    model: &Model,
    mb: &Minibatch,
    stage: TrainStage,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    for l in stage.trainable_layers() {
        let frozen = model
            .params
            .iter()
            .any(|(k, p)| crate::detector::params::layer_of(k) == *l && !p.trainable);
        if frozen {
            return Err(Error::State(format!("layer `{l}` must be trainable in stage {stage:?}")));
        }
    }
    let (loss, grads) = evaluate(model, mb, stage, cfg, true)?;
    Ok((loss, grads.expect("requested")))
}

fn evaluate(
    model: &Model,
    mb: &Minibatch,
    stage: TrainStage,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<GradientSet>)> {
    check_stage(model, stage)?;
    if !(cfg.lambda >= 0.0) {
        return param(format!("consistency weight must be non-negative, got {}", cfg.lambda));
    }
    let (obj_layer, head) = match stage {
        TrainStage::Pretrain => (layers::RPN_OBJ_B, HeadKind::Base),
        TrainStage::Finetune => (layers::RPN_OBJ_N, HeadKind::Novel),
    };
    let (cls_layer, reg_layer) = match head {
        HeadKind::Base => (layers::CLS_B, layers::REG_B),
        HeadKind::Novel => (layers::CLS_N, layers::REG_N),
    };
    let p = &model.params;
    let mut grads = if want_grad {
        Some(GradientSet::for_layers(model, stage.trainable_layers())?)
    } else {
        None
    };

    // RPN
    let ow = p.weight(obj_layer)?;
    let ob = p.bias(obj_layer).expect("objectness bias");
    let obj_logits: Vec<f64> = mb
        .anchors
        .iter()
        .map(|a| ob.data()[a.scale] + dot(ow.row(a.scale), &a.hidden))
        .collect();
    let obj_labels: Vec<bool> = mb.anchors.iter().map(|a| a.positive).collect();
    let rpn_targets: Vec<Option<[f64; 4]>> = mb.anchors.iter().map(|a| a.target).collect();
    let rpn_deltas = if stage == TrainStage::Pretrain {
        let bw = p.weight(layers::RPN_BOX)?;
        let bb = p.bias(layers::RPN_BOX).expect("rpn_box bias");
        let mut d = Vec::with_capacity(mb.anchors.len() * 4);
        for a in &mb.anchors {
            for k in 0..4 {
                let r = 4 * a.scale + k;
                d.push(bb.data()[r] + dot(bw.row(r), &a.hidden));
            }
        }
        Some(Tensor::new(vec![mb.anchors.len(), 4], d)?)
    } else {
        None
    };

    // ROI heads
    let pdim = model.arch().proj_dim;
    let x = Tensor::new(
        vec![mb.rois.len(), pdim],
        mb.rois.iter().flat_map(|r| r.feature.iter().copied()).collect(),
    )?;
    let logits = head_logits(&x, model, head)?;
    let deltas = head_deltas(&x, model, head)?;
    let labels: Vec<usize> = mb.rois.iter().map(|r| label_column(model, stage, r.label)).collect();
    let roi_targets: Vec<Option<[f64; 4]>> = mb.rois.iter().map(|r| r.target).collect();

    let sup = supervised_detection_losses(&SupervisedInputs {
        roi_logits: &logits,
        roi_labels: &labels,
        roi_deltas: &deltas,
        roi_targets: &roi_targets,
        obj_logits: &obj_logits,
        obj_labels: &obj_labels,
        rpn_deltas: rpn_deltas.as_ref(),
        rpn_targets: &rpn_targets,
    })?;

    let n_roi = mb.rois.len();
    let variant = match (stage, model.novel_head().map(|s| s.domain)) {
        (TrainStage::Finetune, Some(HeadDomain::All)) => cfg.consistency,
        _ => None,
    };
    let mut l_con = 0.0;
    // d(total)/d(logits) of the trained head
    let mut dlogits = vec![0.0; logits.len()];
    let ncls = logits.cols();
    if n_roi > 0 {
        let base_logits = match variant {
            Some(_) => Some(pad_base_logits(&head_logits(&x, model, HeadKind::Base)?, model.split().num_novel())?),
            None => None,
        };
        let base_cols: Vec<usize> = (0..model.split().num_base()).collect();
        let inv = 1.0 / n_roi as f64;
        for i in 0..n_roi {
            let probs = softmax_row(logits.row(i));
            let g = &mut dlogits[i * ncls..(i + 1) * ncls];
            for c in 0..ncls {
                g[c] = probs[c] * inv;
            }
            g[labels[i]] -= inv;
            if let (Some(v), Some(bl)) = (variant, &base_logits) {
                let pb = softmax_row(bl.row(i));
                let (val, gp) = consistency_row(&probs, &pb, &base_cols, v)?;
                l_con += val * inv;
                let inner: f64 = probs.iter().zip(&gp).map(|(a, b)| a * b).sum();
                for c in 0..ncls {
                    g[c] += cfg.lambda * inv * probs[c] * (gp[c] - inner);
                }
            }
        }
    }

    let breakdown = match stage {
        TrainStage::Pretrain => {
            let mut b = LossBreakdown {
                l_cls: sup.l_cls,
                l_box: sup.l_box,
                l_obj: sup.l_obj,
                l_box_rpn: sup.l_box_rpn,
                l_con: 0.0,
                lambda: 0.0,
                total: 0.0,
                empty: sup.empty,
            };
            b.total = b.recomputed_total();
            b
        }
        TrainStage::Finetune => {
            let lambda = if variant.is_some() { cfg.lambda } else { 0.0 };
            let mut b = total_finetune_loss(sup.l_obj, sup.l_cls, sup.l_box, l_con, lambda)?;
            b.empty = sup.empty;
            b
        }
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
    }

    let Some(mut g) = grads.take() else {
        return Ok((breakdown, None));
    };

    // objectness
    let na = mb.anchors.len();
    for (i, a) in mb.anchors.iter().enumerate() {
        let dz = (sigmoid(obj_logits[i]) - if a.positive { 1.0 } else { 0.0 }) / na as f64;
        axpy(g.w(obj_layer).row_mut(a.scale), dz, &a.hidden);
        g.b(obj_layer).expect("objectness bias")[a.scale] += dz;
    }
    // RPN regression
    if let Some(d) = &rpn_deltas {
        let npos = rpn_targets.iter().flatten().count();
        for (i, a) in mb.anchors.iter().enumerate() {
            if let Some(t) = &a.target {
                let gd = smooth_l1_sum_grad(d.row(i), t);
                for k in 0..4 {
                    let dz = gd[k] / npos as f64;
                    axpy(g.w(layers::RPN_BOX).row_mut(4 * a.scale + k), dz, &a.hidden);
                    g.b(layers::RPN_BOX).expect("rpn_box bias")[4 * a.scale + k] += dz;
                }
            }
        }
    }
    // classifier
    let kind = match head {
        HeadKind::Base => ClassifierKind::Fc,
        HeadKind::Novel => model.novel_head().expect("checked").classifier,
    };
    let cw = p.weight(cls_layer)?;
    let alpha = model.arch().cosine_scale;
    let wnorms: Vec<f64> = (0..cw.rows()).map(|c| norm(cw.row(c))).collect();
    for i in 0..n_roi {
        let f = x.row(i);
        let dz = &dlogits[i * ncls..(i + 1) * ncls];
        match kind {
            ClassifierKind::Fc => {
                for c in 0..ncls {
                    axpy(g.w(cls_layer).row_mut(c), dz[c], f);
                    g.b(cls_layer).expect("fc bias")[c] += dz[c];
                }
            }
            ClassifierKind::Cos => {
                let fnorm = norm(f).max(COSINE_EPS);
                let fhat: Vec<f64> = f.iter().map(|v| v / fnorm).collect();
                for c in 0..ncls {
                    let w = cw.row(c);
                    let gw = g.w(cls_layer).row_mut(c);
                    if wnorms[c] > COSINE_EPS {
                        let n = wnorms[c];
                        let proj = dot(&fhat, w) / (n * n * n);
                        for k in 0..w.len() {
                            gw[k] += dz[c] * alpha * (fhat[k] / n - proj * w[k]);
                        }
                    } else {
                        axpy(gw, dz[c] * alpha / COSINE_EPS, &fhat);
                    }
                }
            }
        }
    }
    // box regression
    let npos = roi_targets.iter().flatten().count();
    for i in 0..n_roi {
        if let Some(t) = &roi_targets[i] {
            let gd = smooth_l1_sum_grad(deltas.row(i), t);
            for k in 0..4 {
                let dz = gd[k] / npos as f64;
                axpy(g.w(reg_layer).row_mut(k), dz, x.row(i));
                g.b(reg_layer).expect("regressor bias")[k] += dz;
            }
        }
    }
    Ok((breakdown, Some(g)))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
