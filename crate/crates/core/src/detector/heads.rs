use super::model::{ClassifierKind, HeadKind, ImageFeatures, Model};
use super::params::{layers, scale_name, shift_name};
use crate::error::{Error, Result};
use crate::ops::{cosine_logits, dot, linear_forward, roi_pool, BBox};
use crate::tensor::Tensor;

/// ROI-pooled features passed through the frozen projection, a ReLU and the
/// projection's elementwise affine map.
pub fn roi_features(feat: &Tensor, boxes: &[BBox], model: &Model) -> Result<Tensor> {
    let mut x = roi_features_raw(feat, boxes, model)?;
    let scale = model.params.get(&scale_name(layers::BOXHEAD_PROJ)).expect("validated").value.data();
    let shift = model.params.get(&shift_name(layers::BOXHEAD_PROJ)).expect("validated").value.data();
    for i in 0..x.rows() {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = *v * scale[j] + shift[j];
        }
    }
    Ok(x)
}

/// Projection outputs before the affine map.
pub(crate) fn roi_features_raw(feat: &Tensor, boxes: &[BBox], model: &Model) -> Result<Tensor> {
    let a = model.arch();
    let w = model.params.weight(layers::BOXHEAD_PROJ)?;
    let mut out = Vec::with_capacity(boxes.len() * a.proj_dim);
    for b in boxes {
        let pooled = roi_pool(feat, b, a.roi_bins, a.stride())?;
        for r in 0..a.proj_dim {
            out.push(dot(w.row(r), &pooled).max(0.0));
        }
    }
    Tensor::new(vec![boxes.len(), a.proj_dim], out)
}

fn layers_of(head: HeadKind) -> (&'static str, &'static str) {
    match head {
        HeadKind::Base => (layers::CLS_B, layers::REG_B),
        HeadKind::Novel => (layers::CLS_N, layers::REG_N),
    }
}

fn check_head(model: &Model, head: HeadKind) -> Result<()> {
    if head == HeadKind::Novel && !model.is_retentive() {
        return Err(Error::State("a base detector has no novel head".into()));
    }
    Ok(())
}

/// Classification logits of one head: fc over `[base..., background]` for
/// the base head, cosine (or fc) over the novel head's domain otherwise.
pub fn head_logits(roi_feats: &Tensor, model: &Model, head: HeadKind) -> Result<Tensor> {
    check_head(model, head)?;
    let (cls, _) = layers_of(head);
    let w = model.params.weight(cls)?;
    if roi_feats.rows() == 0 {
        return Ok(Tensor::zeros(vec![0, w.rows()]));
    }
    let kind = match head {
        HeadKind::Base => ClassifierKind::Fc,
        HeadKind::Novel => model.novel_head().expect("checked").classifier,
    };
    match kind {
        ClassifierKind::Fc => linear_forward(roi_feats, w, model.params.bias(cls).expect("fc has a bias")),
        ClassifierKind::Cos => cosine_logits(roi_feats, w, model.arch().cosine_scale),
    }
}

/// Class-agnostic box deltas of one head (`N x 4`).
pub fn head_deltas(roi_feats: &Tensor, model: &Model, head: HeadKind) -> Result<Tensor> {
    check_head(model, head)?;
    let (_, reg) = layers_of(head);
    if roi_feats.rows() == 0 {
        return Ok(Tensor::zeros(vec![0, 4]));
    }
    linear_forward(
        roi_feats,
        model.params.weight(reg)?,
        model.params.bias(reg).expect("regressors have a bias"),
    )
}

/// Logits and box deltas of one head for the given proposals.
pub fn roi_head_forward(
    feats: &ImageFeatures,
    boxes: &[BBox],
    model: &Model,
    head: HeadKind,
) -> Result<(Tensor, Tensor)> {
    let x = roi_features(&feats.feat, boxes, model)?;
    Ok((head_logits(&x, model, head)?, head_deltas(&x, model, head)?))
}

/// Inserts `num_novel` zero logits between the base block and the trailing
/// background logit.
pub fn pad_base_logits(logits: &Tensor, num_novel: usize) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.cols() == 0 {
        return Err(Error::State(format!(
            "base logits must be N x (base + background), got {:?}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(n * (c + num_novel));
    for i in 0..n {
        let row = logits.row(i);
        out.extend_from_slice(&row[..c - 1]);
        out.extend(std::iter::repeat_n(0.0, num_novel));
        out.push(row[c - 1]);
    }
    Tensor::new(vec![n, c + num_novel], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::{ArchConfig, NovelHeadSpec};
    use crate::ops::softmax;
    use crate::synthgen::split_classes;

    #[test]
    fn padding() {
        let l = Tensor::matrix(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        assert_eq!(pad_base_logits(&l, 0).unwrap(), l);
        let p = pad_base_logits(&l, 2).unwrap();
        assert_eq!(p.data(), &[2.0, -1.0, 0.0, 0.0, 0.5]);
        let s = softmax(&p).unwrap();
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(pad_base_logits(&Tensor::zeros(vec![2, 0]), 1), Err(Error::State(_))));
    }

    #[test]
    fn novel_logits_are_norm_invariant_base_logits_are_not() {
        let split = split_classes(12, 4, 0).unwrap();
        let base = Model::init_base(split, ArchConfig::default(), 1, 2).unwrap();
        let m = base.attach_novel_heads(NovelHeadSpec::default(), false, 4).unwrap();
        let x = Tensor::from_fn(vec![2, 256], |i| ((i * 13) % 7) as f64 * 0.1);
        let x10 = Tensor::from_fn(vec![2, 256], |i| x.data()[i] * 10.0);
        let a = head_logits(&x, &m, HeadKind::Novel).unwrap();
        let b = head_logits(&x10, &m, HeadKind::Novel).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
        let a = head_logits(&x, &m, HeadKind::Base).unwrap();
        let b = head_logits(&x10, &m, HeadKind::Base).unwrap();
        assert_ne!(a, b);
        assert!(head_logits(&x, &base, HeadKind::Novel).is_err());
        assert_eq!(head_logits(&Tensor::zeros(vec![0, 256]), &m, HeadKind::Base).unwrap().shape(), &[0, 9]);
    }

    #[test]
    fn duplicate_proposals_give_identical_rows() {
        let split = split_classes(12, 4, 0).unwrap();
        let m = Model::init_base(split, ArchConfig::default(), 1, 2).unwrap();
        let img: Vec<f64> = (0..64 * 64).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let f = m.features(&img).unwrap();
        let b = BBox::new(10.0, 12.0, 30.0, 33.0);
        let (l, d) = roi_head_forward(&f, &[b, b], &m, HeadKind::Base).unwrap();
        assert_eq!(l.row(0), l.row(1));
        assert_eq!(d.row(0), d.row(1));
    }
}
