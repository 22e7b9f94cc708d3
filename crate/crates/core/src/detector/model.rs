use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::heads::roi_features_raw;
use super::params::{bias_name, gaussian, layers, scale_name, shift_name, weight_name, ParamSet};
use crate::error::{param, Error, Result};
use crate::ops::{generate_anchors, roi_pool, AnchorGrid, BBox, Featurizer, FeaturizerConfig};
use crate::ops::featurizer::FEATURE_STRIDE;
use crate::rng::{stream_rng, streams};
use crate::synthgen::{ClassId, ClassSplit};
use crate::tensor::Tensor;

/// Standard deviation of every randomly initialised trainable head.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Architecture of everything above the frozen featurizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub image_side: usize,
    pub featurizer: FeaturizerConfig,
    pub anchor_scales: Vec<f64>,
    /// Pooling bins per side when the RPN mixer summarises an anchor window.
    pub context_bins: usize,
    pub mixer_dim: usize,
    pub roi_bins: usize,
    pub proj_dim: usize,
    pub cosine_scale: f64,
    /// Typical L2 norm of the mixer and ROI projection outputs: after
    /// calibration every output unit is standardised and scaled by
    /// `gain / sqrt(dim)`.
    pub mixer_gain: f64,
    pub proj_gain: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            featurizer: FeaturizerConfig::default(),
            anchor_scales: vec![8.0, 16.0, 32.0],
            context_bins: 2,
            mixer_dim: 128,
            roi_bins: 3,
            proj_dim: 256,
            cosine_scale: 7.0,
            mixer_gain: 1.0,
            proj_gain: 4.0,
        }
    }
}

impl ArchConfig {
    pub fn stride(&self) -> f64 {
        FEATURE_STRIDE as f64
    }

    pub fn feature_side(&self) -> usize {
        self.image_side / FEATURE_STRIDE
    }

    pub fn num_scales(&self) -> usize {
        self.anchor_scales.len()
    }

    pub fn context_dim(&self) -> usize {
        self.num_scales() * self.featurizer.out_channels * self.context_bins * self.context_bins
    }

    pub fn roi_dim(&self) -> usize {
        self.featurizer.out_channels * self.roi_bins * self.roi_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % FEATURE_STRIDE != 0 {
            return param(format!("image side must be a multiple of {FEATURE_STRIDE}"));
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return param("anchor scales must be positive");
        }
        if self.context_bins == 0 || self.roi_bins == 0 || self.mixer_dim == 0 || self.proj_dim == 0 {
            return param("layer sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Cos,
    Fc,
}

/// Classes the finetuned head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadDomain {
    All,
    NovelOnly,
}

macro_rules! closed_set {
    ($ty:ty, $what:literal, $($name:literal => $v:expr),+ $(,)?) => {
        impl ::std::str::FromStr for $ty {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err($crate::error::Error::Param(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                let s = match self { $(x if *x == $v => $name,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}
pub(crate) use closed_set;

closed_set!(ClassifierKind, "classifier", "cos" => ClassifierKind::Cos, "fc" => ClassifierKind::Fc);
closed_set!(HeadDomain, "head domain", "all" => HeadDomain::All, "novel-only" => HeadDomain::NovelOnly);
closed_set!(HeadKind, "head", "base" => HeadKind::Base, "novel" => HeadKind::Novel);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NovelHeadSpec {
    pub classifier: ClassifierKind,
    pub domain: HeadDomain,
}

impl Default for NovelHeadSpec {
    fn default() -> Self {
        Self {
            classifier: ClassifierKind::Cos,
            domain: HeadDomain::All,
        }
    }
}

impl NovelHeadSpec {
    /// Foreground ids of the head's logit columns; one more column follows
    /// for background.
    pub fn class_ids(&self, split: &ClassSplit) -> Vec<ClassId> {
        match self.domain {
            HeadDomain::All => split.canonical_ids().collect(),
            HeadDomain::NovelOnly => split.novel_ids().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Untrained,
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub split: ClassSplit,
    pub feat_seed: u64,
    pub arch: ArchConfig,
    pub stage: Stage,
    pub novel_head: Option<NovelHeadSpec>,
}

/// Cached per-image activations below the trainable layers.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `D x Hf x Wf` featurizer output.
    pub feat: Tensor,
    /// `cells x mixer_dim` output of the frozen RPN mixer.
    pub hidden: Tensor,
}

/// A detector: either a base detector (pretrained heads only) or a retentive
/// detector that additionally carries the finetuned novel heads.
#[derive(Debug, Clone)]
pub struct Model {
    meta: ModelMeta,
    pub params: ParamSet,
    featurizer: Featurizer,
    anchors: AnchorGrid,
}

impl Model {
    /// Fresh base detector: frozen random mixer and projection, small random
    /// trainable heads.
    pub fn init_base(split: ClassSplit, arch: ArchConfig, feat_seed: u64, init_seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(init_seed, streams::MODEL_INIT, 0);
        let s = arch.num_scales();
        let (hm, p) = (arch.mixer_dim, arch.proj_dim);
        let mut params = ParamSet::default();
        let ctx = arch.context_dim();
        params.insert(
            weight_name(layers::RPN_SHARED),
            gaussian(&mut rng, vec![hm, ctx], (2.0 / ctx as f64).sqrt()),
            false,
        );
        params.insert(scale_name(layers::RPN_SHARED), Tensor::vector(vec![1.0; hm]), false);
        params.insert(shift_name(layers::RPN_SHARED), Tensor::zeros(vec![hm]), false);
        let rd = arch.roi_dim();
        params.insert(
            weight_name(layers::BOXHEAD_PROJ),
            gaussian(&mut rng, vec![p, rd], (2.0 / rd as f64).sqrt()),
            false,
        );
        params.insert(scale_name(layers::BOXHEAD_PROJ), Tensor::vector(vec![1.0; p]), false);
        params.insert(shift_name(layers::BOXHEAD_PROJ), Tensor::zeros(vec![p]), false);
        let mut head = |params: &mut ParamSet, layer: &str, rows: usize, cols: usize| {
            params.insert(weight_name(layer), gaussian(&mut rng, vec![rows, cols], HEAD_INIT_STD), false);
            params.insert(bias_name(layer), Tensor::zeros(vec![rows]), false);
        };
        head(&mut params, layers::RPN_OBJ_B, s, hm);
        head(&mut params, layers::RPN_BOX, 4 * s, hm);
        head(&mut params, layers::CLS_B, split.num_base() + 1, p);
        head(&mut params, layers::REG_B, 4, p);
        let meta = ModelMeta {
            split,
            feat_seed,
            arch,
            stage: Stage::Untrained,
            novel_head: None,
        };
        Self::from_parts(meta, params)
    }

    /// Reassembles a model, checking every array shape against the metadata.
    pub fn from_parts(meta: ModelMeta, params: ParamSet) -> Result<Self> {
        meta.arch.validate()?;
        let a = &meta.arch;
        let s = a.num_scales();
        let (hm, p) = (a.mixer_dim, a.proj_dim);
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            (weight_name(layers::RPN_SHARED), vec![hm, a.context_dim()]),
            (scale_name(layers::RPN_SHARED), vec![hm]),
            (shift_name(layers::RPN_SHARED), vec![hm]),
            (weight_name(layers::BOXHEAD_PROJ), vec![p, a.roi_dim()]),
            (scale_name(layers::BOXHEAD_PROJ), vec![p]),
            (shift_name(layers::BOXHEAD_PROJ), vec![p]),
            (weight_name(layers::RPN_OBJ_B), vec![s, hm]),
            (bias_name(layers::RPN_OBJ_B), vec![s]),
            (weight_name(layers::RPN_BOX), vec![4 * s, hm]),
            (bias_name(layers::RPN_BOX), vec![4 * s]),
            (weight_name(layers::CLS_B), vec![meta.split.num_base() + 1, p]),
            (bias_name(layers::CLS_B), vec![meta.split.num_base() + 1]),
            (weight_name(layers::REG_B), vec![4, p]),
            (bias_name(layers::REG_B), vec![4]),
        ];
        if let Some(novel) = meta.novel_head {
            let c = novel.class_ids(&meta.split).len() + 1;
            expect.push((weight_name(layers::RPN_OBJ_N), vec![s, hm]));
            expect.push((bias_name(layers::RPN_OBJ_N), vec![s]));
            expect.push((weight_name(layers::CLS_N), vec![c, p]));
            if novel.classifier == ClassifierKind::Fc {
                expect.push((bias_name(layers::CLS_N), vec![c]));
            }
            expect.push((weight_name(layers::REG_N), vec![4, p]));
            expect.push((bias_name(layers::REG_N), vec![4]));
        }
        if expect.len() != params.len() {
            return Err(Error::State(format!(
                "parameter set has {} arrays, architecture needs {}",
                params.len(),
                expect.len()
            )));
        }
        for (name, shape) in &expect {
            match params.get(name) {
                Some(p) if p.value.shape() == shape.as_slice() => {}
                Some(p) => {
                    return Err(Error::State(format!(
                        "array `{name}` has shape {:?}, expected {shape:?}",
                        p.value.shape()
                    )))
                }
                None => return Err(Error::State(format!("missing array `{name}`"))),
            }
        }
        let featurizer = Featurizer::new(meta.feat_seed, meta.arch.featurizer);
        let fs = meta.arch.feature_side();
        let anchors = generate_anchors(fs, fs, meta.arch.stride(), &meta.arch.anchor_scales);
        Ok(Self {
            meta,
            params,
            featurizer,
            anchors,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn split(&self) -> &ClassSplit {
        &self.meta.split
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.meta.arch
    }

    pub fn stage(&self) -> Stage {
        self.meta.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.meta.stage = stage;
    }

    pub fn novel_head(&self) -> Option<NovelHeadSpec> {
        self.meta.novel_head
    }

    pub fn is_retentive(&self) -> bool {
        self.meta.novel_head.is_some()
    }

    pub fn anchors(&self) -> &AnchorGrid {
        &self.anchors
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    /// Digest of the arrays a base detector owns.
    pub fn base_digest(&self) -> String {
        self.params.digest(Some(&layers::BASE))
    }

    /// Extends a pretrained base detector with finetunable novel heads.
    ///
    /// `rpn_obj_n` starts as a copy of `rpn_obj_b` unless `random_rpn_init`;
    /// the classifier and regressor start from a seeded Gaussian.
    pub fn attach_novel_heads(
        &self,
        spec: NovelHeadSpec,
        random_rpn_init: bool,
        init_seed: u64,
    ) -> Result<Self> {
        if self.is_retentive() {
            return Err(Error::State("model already carries novel heads".into()));
        }
        let mut rng = stream_rng(init_seed, streams::FINETUNE_INIT, 0);
        let mut params = self.params.clone();
        let a = &self.meta.arch;
        let (s, hm, p) = (a.num_scales(), a.mixer_dim, a.proj_dim);
        if random_rpn_init {
            params.insert(weight_name(layers::RPN_OBJ_N), gaussian(&mut rng, vec![s, hm], HEAD_INIT_STD), false);
            params.insert(bias_name(layers::RPN_OBJ_N), Tensor::zeros(vec![s]), false);
        } else {
            params.insert(weight_name(layers::RPN_OBJ_N), self.params.weight(layers::RPN_OBJ_B)?.clone(), false);
            let b = self.params.bias(layers::RPN_OBJ_B).expect("rpn_obj_b has a bias").clone();
            params.insert(bias_name(layers::RPN_OBJ_N), b, false);
        }
        let c = spec.class_ids(&self.meta.split).len() + 1;
        params.insert(weight_name(layers::CLS_N), gaussian(&mut rng, vec![c, p], HEAD_INIT_STD), false);
        if spec.classifier == ClassifierKind::Fc {
            params.insert(bias_name(layers::CLS_N), Tensor::zeros(vec![c]), false);
        }
        params.insert(weight_name(layers::REG_N), gaussian(&mut rng, vec![4, p], HEAD_INIT_STD), false);
        params.insert(bias_name(layers::REG_N), Tensor::zeros(vec![4]), false);
        let meta = ModelMeta {
            novel_head: Some(spec),
            ..self.meta.clone()
        };
        Self::from_parts(meta, params)
    }

    /// Retentive model whose novel heads replicate the base heads exactly: an
    /// fc classifier over all classes whose novel rows are zero (matching the
    /// zero padding of base logits) and copies of the base regressor and
    /// objectness layers.
    pub fn with_copied_novel_heads(&self) -> Result<Self> {
        let spec = NovelHeadSpec {
            classifier: ClassifierKind::Fc,
            domain: HeadDomain::All,
        };
        let mut m = self.attach_novel_heads(spec, false, 0)?;
        let split = &self.meta.split;
        let (nb, nn, p) = (split.num_base(), split.num_novel(), self.meta.arch.proj_dim);
        let wb = self.params.weight(layers::CLS_B)?;
        let bb = self.params.bias(layers::CLS_B).expect("cls_b has a bias");
        let mut w = Tensor::zeros(vec![nb + nn + 1, p]);
        let mut b = Tensor::zeros(vec![nb + nn + 1]);
        for r in 0..nb {
            w.row_mut(r).copy_from_slice(wb.row(r));
            b.data_mut()[r] = bb.data()[r];
        }
        w.row_mut(nb + nn).copy_from_slice(wb.row(nb));
        b.data_mut()[nb + nn] = bb.data()[nb];
        m.params.insert(weight_name(layers::CLS_N), w, false);
        m.params.insert(bias_name(layers::CLS_N), b, false);
        m.params.insert(weight_name(layers::REG_N), self.params.weight(layers::REG_B)?.clone(), false);
        let rb = self.params.bias(layers::REG_B).expect("reg_b has a bias").clone();
        m.params.insert(bias_name(layers::REG_N), rb, false);
        Ok(m)
    }

    /// Fits the frozen affine maps of the mixer and the ROI projection so
    /// that, over the given images, every output unit has zero mean and
    /// standard deviation `gain / sqrt(dim)`. Mixer statistics cover every
    /// cell; projection statistics cover `rois[i]` plus every anchor box of
    /// image `i`. Units that never vary are switched off.
    pub fn calibrate(&mut self, images: &[&[f64]], rois: &[Vec<BBox>]) -> Result<()> {
        if images.len() != rois.len() || images.is_empty() {
            return param("calibration needs one ROI list per image and at least one image");
        }
        let side = self.meta.arch.image_side as f64;
        let parts: Vec<(Tensor, Tensor)> = images
            .par_iter()
            .zip(rois)
            .map(|(px, r)| {
                let feat = self.featurizer.apply(px, self.meta.arch.image_side)?;
                let hidden = self.mix_raw(&feat)?;
                let mut boxes = r.clone();
                boxes.extend(self.anchors.boxes.iter().map(|b| b.clip(side, side)).filter(|b| b.is_valid()));
                Ok((hidden, roi_features_raw(&feat, &boxes, self)?))
            })
            .collect::<Result<_>>()?;
        let fit = |rows: Vec<&Tensor>, dim: usize, gain: f64| -> (Vec<f64>, Vec<f64>) {
            let (mut s1, mut s2, mut n) = (vec![0.0; dim], vec![0.0; dim], 0usize);
            for t in rows {
                for i in 0..t.rows() {
                    for (j, v) in t.row(i).iter().enumerate() {
                        s1[j] += v;
                        s2[j] += v * v;
                    }
                    n += 1;
                }
            }
            let target = gain / (dim as f64).sqrt();
            let mut scale = vec![0.0; dim];
            let mut shift = vec![0.0; dim];
            for j in 0..dim {
                let mean = s1[j] / n as f64;
                let var = (s2[j] / n as f64 - mean * mean).max(0.0);
                if var > 1e-12 * (1.0 + mean * mean) {
                    scale[j] = target / var.sqrt();
                    shift[j] = -mean * scale[j];
                }
            }
            (scale, shift)
        };
        let a = self.meta.arch.clone();
        let (sc, sh) = fit(parts.iter().map(|p| &p.0).collect(), a.mixer_dim, a.mixer_gain);
        self.params.insert(scale_name(layers::RPN_SHARED), Tensor::vector(sc), false);
        self.params.insert(shift_name(layers::RPN_SHARED), Tensor::vector(sh), false);
        let (sc, sh) = fit(parts.iter().map(|p| &p.1).collect(), a.proj_dim, a.proj_gain);
        self.params.insert(scale_name(layers::BOXHEAD_PROJ), Tensor::vector(sc), false);
        self.params.insert(shift_name(layers::BOXHEAD_PROJ), Tensor::vector(sh), false);
        Ok(())
    }

    /// Featurizer output plus the frozen RPN mixer activations.
    pub fn features(&self, pixels: &[f64]) -> Result<ImageFeatures> {
        let feat = self.featurizer.apply(pixels, self.meta.arch.image_side)?;
        let hidden = self.mix(&feat)?;
        Ok(ImageFeatures { feat, hidden })
    }

    /// For every cell, pools the feature map over each anchor window and
    /// applies the frozen mixer: ReLU, then the elementwise affine map.
    fn mix(&self, feat: &Tensor) -> Result<Tensor> {
        let mut out = self.mix_raw(feat)?;
        let a = &self.meta.arch;
        let scale = self.params.get(&scale_name(layers::RPN_SHARED)).expect("validated").value.data();
        let shift = self.params.get(&shift_name(layers::RPN_SHARED)).expect("validated").value.data();
        for c in 0..out.rows() {
            let row = out.row_mut(c);
            for r in 0..a.mixer_dim {
                row[r] = row[r] * scale[r] + shift[r];
            }
        }
        Ok(out)
    }

    fn mix_raw(&self, feat: &Tensor) -> Result<Tensor> {
        let a = &self.meta.arch;
        let w = self.params.weight(layers::RPN_SHARED)?;
        let (cells, s) = (self.anchors.num_cells(), a.num_scales());
        let per = a.featurizer.out_channels * a.context_bins * a.context_bins;
        let mut ctx = vec![0.0; a.context_dim()];
        let mut out = Vec::with_capacity(cells * a.mixer_dim);
        for c in 0..cells {
            for k in 0..s {
                let pooled = roi_pool(feat, &self.anchors.boxes[c * s + k], a.context_bins, a.stride())?;
                ctx[k * per..(k + 1) * per].copy_from_slice(&pooled);
            }
            for r in 0..a.mixer_dim {
                out.push(crate::ops::dot(w.row(r), &ctx).max(0.0));
            }
        }
        Tensor::new(vec![cells, a.mixer_dim], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::split_classes;

    fn model() -> Model {
        let split = split_classes(12, 4, 0).unwrap();
        Model::init_base(split, ArchConfig::default(), 1, 2).unwrap()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = model();
        assert_eq!(m.params.weight(layers::CLS_B).unwrap().shape(), &[9, 256]);
        assert_eq!(m.anchors().len(), 768);
        assert_eq!(m.base_digest(), model().base_digest());
        assert!(!m.is_retentive());
    }

    #[test]
    fn zero_image_zero_hidden() {
        let f = model().features(&vec![0.0; 64 * 64]).unwrap();
        assert_eq!(f.hidden.shape(), &[256, 128]);
        assert!(f.hidden.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn novel_heads_keep_base_subset() {
        let m = model();
        let spec = NovelHeadSpec::default();
        let r = m.attach_novel_heads(spec, false, 3).unwrap();
        assert_eq!(r.base_digest(), m.base_digest());
        assert_eq!(r.params.weight(layers::CLS_N).unwrap().shape(), &[13, 256]);
        assert!(r.params.bias(layers::CLS_N).is_none());
        assert_eq!(
            r.params.weight(layers::RPN_OBJ_N).unwrap(),
            m.params.weight(layers::RPN_OBJ_B).unwrap()
        );
        assert!(r.attach_novel_heads(spec, false, 3).is_err());
        let only = m
            .attach_novel_heads(NovelHeadSpec { classifier: ClassifierKind::Cos, domain: HeadDomain::NovelOnly }, true, 3)
            .unwrap();
        assert_eq!(only.params.weight(layers::CLS_N).unwrap().shape(), &[5, 256]);
    }

    #[test]
    fn from_parts_rejects_wrong_shapes() {
        let m = model();
        let mut p = m.params.clone();
        p.insert(weight_name(layers::CLS_B), Tensor::zeros(vec![3, 256]), false);
        assert!(Model::from_parts(m.meta().clone(), p).is_err());
    }

    #[test]
    fn closed_sets_parse() {
        assert_eq!("novel-only".parse::<HeadDomain>().unwrap(), HeadDomain::NovelOnly);
        assert_eq!(ClassifierKind::Fc.to_string(), "fc");
        assert!(matches!("conv".parse::<ClassifierKind>(), Err(Error::Param(_))));
    }
}
