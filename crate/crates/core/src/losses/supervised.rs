use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::ops::{log_softmax_row, smooth_l1_grad};
use crate::tensor::Tensor;

/// Loss terms of one minibatch.
///
/// `total = l_obj + l_box_rpn + l_cls + l_box + lambda * l_con`; the RPN box
/// term only trains during pretraining and `l_con` only during finetuning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_obj: f64,
    pub l_box_rpn: f64,
    pub l_con: f64,
    pub lambda: f64,
    pub total: f64,
    /// Nothing was sampled, so every term is zero by convention.
    pub empty: bool,
}

impl LossBreakdown {
    pub fn recomputed_total(&self) -> f64 {
        self.l_obj + self.l_box_rpn + self.l_cls + self.l_box + self.lambda * self.l_con
    }
}

/// Assembles the finetuning objective from its components.
pub fn total_finetune_loss(l_obj: f64, l_cls: f64, l_box: f64, l_con: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return param(format!("consistency weight must be non-negative, got {lambda}"));
    }
    let mut b = LossBreakdown {
        l_cls,
        l_box,
        l_obj,
        l_con,
        lambda,
        ..LossBreakdown::default()
    };
    b.total = b.recomputed_total();
    Ok(b)
}

/// Predictions and assigned targets for the sampled anchors and ROIs.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedInputs<'a> {
    /// `N_roi x C` classification logits.
    pub roi_logits: &'a Tensor,
    /// Target column of each ROI.
    pub roi_labels: &'a [usize],
    /// `N_roi x 4` predicted deltas.
    pub roi_deltas: &'a Tensor,
    /// Encoded ground-truth deltas of positive ROIs.
    pub roi_targets: &'a [Option<[f64; 4]>],
    pub obj_logits: &'a [f64],
    pub obj_labels: &'a [bool],
    /// `N_anchor x 4` predicted RPN deltas, when the RPN regressor trains.
    pub rpn_deltas: Option<&'a Tensor>,
    pub rpn_targets: &'a [Option<[f64; 4]>],
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SupervisedLosses {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_obj: f64,
    pub l_box_rpn: f64,
    pub empty: bool,
}

/// Softplus-form binary cross-entropy of a logit.
pub(crate) fn bce_with_logit(z: f64, positive: bool) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    if positive {
        softplus - z
    } else {
        softplus
    }
}

pub(crate) fn smooth_l1_sum(pred: &[f64], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })
        .sum()
}

pub(crate) fn smooth_l1_sum_grad(pred: &[f64], target: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| smooth_l1_grad(pred[k] - target[k]))
}

/// Mean softmax cross-entropy over ROIs, mean smooth-L1 over positive ROIs,
/// mean binary cross-entropy over sampled anchors and mean smooth-L1 over
/// positive anchors.
pub fn supervised_detection_losses(x: &SupervisedInputs<'_>) -> Result<SupervisedLosses> {
    let n_roi = x.roi_labels.len();
    let n_anchor = x.obj_labels.len();
    if x.roi_logits.rows() != n_roi
        || x.roi_deltas.rows() != n_roi
        || x.roi_targets.len() != n_roi
        || x.obj_logits.len() != n_anchor
        || x.rpn_targets.len() != n_anchor
        || x.rpn_deltas.is_some_and(|d| d.rows() != n_anchor)
    {
        return param("supervised loss inputs are not aligned");
    }
    let mut out = SupervisedLosses {
        empty: n_roi == 0 && n_anchor == 0,
        ..SupervisedLosses::default()
    };
    if n_roi > 0 {
        let mut ce = 0.0;
        for i in 0..n_roi {
            if x.roi_labels[i] >= x.roi_logits.cols() {
                return param("ROI label outside the head's classes");
            }
            ce -= log_softmax_row(x.roi_logits.row(i))[x.roi_labels[i]];
        }
        out.l_cls = ce / n_roi as f64;
        out.l_box = mean_over_positives(x.roi_targets, |i, t| smooth_l1_sum(x.roi_deltas.row(i), t));
    }
    if n_anchor > 0 {
        let bce: f64 = (0..n_anchor).map(|i| bce_with_logit(x.obj_logits[i], x.obj_labels[i])).sum();
        out.l_obj = bce / n_anchor as f64;
        if let Some(d) = x.rpn_deltas {
            out.l_box_rpn = mean_over_positives(x.rpn_targets, |i, t| smooth_l1_sum(d.row(i), t));
        }
    }
    Ok(out)
}

fn mean_over_positives(targets: &[Option<[f64; 4]>], f: impl Fn(usize, &[f64; 4]) -> f64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = t {
            acc += f(i, t);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_arithmetic() {
        let b = total_finetune_loss(1.0, 2.0, 3.0, 4.0, 0.1).unwrap();
        assert!((b.total - 6.4).abs() < 1e-12);
        assert_eq!(total_finetune_loss(0.0, 0.0, 0.0, 0.0, 0.1).unwrap().total, 0.0);
        let a = total_finetune_loss(1.0, 2.0, 3.0, 4.0, 0.0).unwrap();
        let c = total_finetune_loss(1.0, 2.0, 3.0, 9.0, 0.0).unwrap();
        assert_eq!(a.total, c.total);
        assert!(total_finetune_loss(1.0, 2.0, 3.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn perfect_predictions_give_zero() {
        let logits = Tensor::matrix(2, 3, vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]).unwrap();
        let deltas = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let targets = [Some([0.1, 0.2, 0.3, 0.4]), None];
        let l = supervised_detection_losses(&SupervisedInputs {
            roi_logits: &logits,
            roi_labels: &[0, 2],
            roi_deltas: &deltas,
            roi_targets: &targets,
            obj_logits: &[],
            obj_labels: &[],
            rpn_deltas: None,
            rpn_targets: &[],
        })
        .unwrap();
        assert_eq!(l.l_cls, 0.0);
        assert_eq!(l.l_box, 0.0);
        assert!(!l.empty);
    }

    #[test]
    fn two_roi_case_matches_scalar_loop() {
        let z = [[1.0, -0.5, 0.25], [0.3, 2.0, -1.0]];
        let labels = [2usize, 1];
        let pred = [[0.5, -1.5, 0.2, 0.0], [0.0; 4]];
        let tgt = [0.0, 0.0, 0.0, 0.4];
        let obj = [0.7, -1.2, 2.5];
        let obj_y = [true, false, false];
        let logits = Tensor::matrix(2, 3, z.concat()).unwrap();
        let deltas = Tensor::matrix(2, 4, pred.concat()).unwrap();
        let l = supervised_detection_losses(&SupervisedInputs {
            roi_logits: &logits,
            roi_labels: &labels,
            roi_deltas: &deltas,
            roi_targets: &[Some(tgt), None],
            obj_logits: &obj,
            obj_labels: &obj_y,
            rpn_deltas: None,
            rpn_targets: &[None, None, None],
        })
        .unwrap();
        let mut ce = 0.0;
        for r in 0..2 {
            let s: f64 = z[r].iter().map(|v: &f64| v.exp()).sum();
            ce += -(z[r][labels[r]].exp() / s).ln();
        }
        // |0.5| -> 0.125, |-1.5| -> 1.0, |0.2| -> 0.02, |-0.4| -> 0.08
        let bx = 0.125 + 1.0 + 0.02 + 0.08;
        let mut b = 0.0;
        for i in 0..3 {
            let o = 1.0 / (1.0 + (-obj[i] as f64).exp());
            b += if obj_y[i] { -o.ln() } else { -(1.0 - o).ln() };
        }
        assert!((l.l_cls - ce / 2.0).abs() < 1e-12);
        assert!((l.l_box - bx).abs() < 1e-12);
        assert!((l.l_obj - b / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_flagged() {
        let e = Tensor::zeros(vec![0, 3]);
        let d = Tensor::zeros(vec![0, 4]);
        let l = supervised_detection_losses(&SupervisedInputs {
            roi_logits: &e,
            roi_labels: &[],
            roi_deltas: &d,
            roi_targets: &[],
            obj_logits: &[],
            obj_labels: &[],
            rpn_deltas: None,
            rpn_targets: &[],
        })
        .unwrap();
        assert!(l.empty);
        assert_eq!(l.l_cls + l.l_box + l.l_obj, 0.0);
    }
}
