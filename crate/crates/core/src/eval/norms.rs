use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{roi_features, ImageFeatures, Model};
use crate::error::Result;
use crate::ops::norm;
use crate::synthgen::{ClassId, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassNorm {
    pub class_id: ClassId,
    pub seen: bool,
    pub instances: usize,
    pub mean_norm: Option<f64>,
}

/// Mean L2 norm of projected ROI features on ground-truth boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorms {
    pub per_class: Vec<ClassNorm>,
    /// Mean over base-class instances.
    pub seen_mean: Option<f64>,
    /// Mean over novel-class instances.
    pub unseen_mean: Option<f64>,
}

pub fn roi_feature_norms(model: &Model, ds: &Dataset) -> Result<FeatureNorms> {
    let feats: Vec<ImageFeatures> = ds.images.par_iter().map(|im| model.features(&im.pixels)).collect::<Result<_>>()?;
    roi_feature_norms_with(model, ds, &feats)
}

/// As [`roi_feature_norms`], reusing precomputed image features.
pub fn roi_feature_norms_with(model: &Model, ds: &Dataset, feats: &[ImageFeatures]) -> Result<FeatureNorms> {
    let split = model.split();
    let n = split.num_classes();
    let per_image: Vec<Vec<(ClassId, f64)>> = ds
        .manifest
        .items
        .par_iter()
        .zip(feats)
        .map(|(rec, f)| {
            let x = roi_features(&f.feat, &rec.gt.boxes, model)?;
            Ok(rec.gt.labels.iter().enumerate().map(|(i, &c)| (c, norm(x.row(i)))).collect())
        })
        .collect::<Result<_>>()?;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    let (mut seen, mut unseen) = ((0.0, 0usize), (0.0, 0usize));
    for (c, v) in per_image.into_iter().flatten() {
        sums[c.0] += v;
        counts[c.0] += 1;
        let g = if split.is_base(c) { &mut seen } else { &mut unseen };
        g.0 += v;
        g.1 += 1;
    }
    let mean = |(s, k): (f64, usize)| (k > 0).then(|| s / k as f64);
    Ok(FeatureNorms {
        per_class: (0..n)
            .map(|c| ClassNorm {
                class_id: ClassId(c),
                seen: split.is_base(ClassId(c)),
                instances: counts[c],
                mean_norm: mean((sums[c], counts[c])),
            })
            .collect(),
        seen_mean: mean(seen),
        unseen_mean: mean(unseen),
    })
}
