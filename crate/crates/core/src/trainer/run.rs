use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::assign::{assign_targets, AssignMode, TargetLabel};
use super::config::TrainConfig;
use super::log::{StopReason, TrainLog, TrainRecord};
use super::sgd::{sgd_step, Velocity};
use crate::detector::{layers, model_proposals, roi_features, ArchConfig, ImageFeatures, Model, RpnStrategy, Stage};
use crate::error::{param, Error, Result};
use crate::losses::{compute_gradients, AnchorSample, Minibatch, RoiSample, TrainStage};
use crate::ops::{encode_box, BBox};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::synthgen::{ClassId, Dataset, DatasetMode, GroundTruth};

/// Base-train images used to fit the frozen feature standardisation.
pub const CALIBRATION_IMAGES: usize = 64;

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Frozen features of every image, computed once per stage.
pub fn dataset_features(model: &Model, ds: &Dataset) -> Result<Vec<ImageFeatures>> {
    ds.images.par_iter().map(|im| model.features(&im.pixels)).collect()
}

/// Samples anchors and ROIs of one image. Anchors and ROIs are labelled from
/// the annotated instances only; proposals come from the model's current
/// RPN (ensembled with `strategy` for retentive models) plus the ground
/// truth boxes.
pub fn sample_image(
    model: &Model,
    feats: &ImageFeatures,
    gt: &GroundTruth,
    strategy: RpnStrategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Minibatch> {
    let (boxes, labels): (Vec<BBox>, Vec<ClassId>) = gt.annotated_only();
    let grid = model.anchors();
    let rpn = assign_targets(&grid.boxes, &boxes, AssignMode::Rpn, cfg, seed);
    let mut anchors = Vec::with_capacity(rpn.sampled.len());
    for &i in &rpn.sampled {
        let (cell, scale) = grid.locate(i);
        let target = match rpn.labels[i] {
            TargetLabel::Positive(j) => Some(encode_box(&boxes[j], &grid.boxes[i])?),
            _ => None,
        };
        anchors.push(AnchorSample {
            hidden: feats.hidden.row(cell).to_vec(),
            scale,
            positive: target.is_some(),
            target,
        });
    }

    let mut cands = model_proposals(feats, model, strategy, &cfg.proposals)?.boxes;
    cands.extend_from_slice(&boxes);
    let roi = assign_targets(&cands, &boxes, AssignMode::Roi, cfg, seed);
    let picked: Vec<BBox> = roi.sampled.iter().map(|&i| cands[i]).collect();
    let x = roi_features(&feats.feat, &picked, model)?;
    let mut rois = Vec::with_capacity(picked.len());
    for (r, &i) in roi.sampled.iter().enumerate() {
        let (label, target) = match roi.labels[i] {
            TargetLabel::Positive(j) => (Some(labels[j]), Some(encode_box(&boxes[j], &cands[i])?)),
            _ => (None, None),
        };
        rois.push(RoiSample {
            feature: x.row(r).to_vec(),
            label,
            target,
        });
    }
    Ok(Minibatch { anchors, rois })
}

/// Pools per-image samples in image order.
pub fn build_minibatch(
    model: &Model,
    feats: &[&ImageFeatures],
    gts: &[&GroundTruth],
    strategy: RpnStrategy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Minibatch> {
    let parts: Vec<Minibatch> = (0..feats.len())
        .into_par_iter()
        .map(|i| sample_image(model, feats[i], gts[i], strategy, cfg, derive_seed(seed, streams::SAMPLING, i as u64)))
        .collect::<Result<_>>()?;
    let mut mb = Minibatch::default();
    for p in parts {
        mb.anchors.extend(p.anchors);
        mb.rois.extend(p.rois);
    }
    Ok(mb)
}

fn stage_name(stage: TrainStage) -> &'static str {
    match stage {
        TrainStage::Pretrain => "pretrain",
        TrainStage::Finetune => "finetune",
    }
}

/// Mean of consecutive windows changed by less than `rel_tol`.
fn converged(records: &[TrainRecord], window: usize, rel_tol: f64) -> bool {
    let n = records.len();
    if n < 2 * window || n % window != 0 {
        return false;
    }
    let mean = |r: &[TrainRecord]| r.iter().map(|r| r.loss.total).sum::<f64>() / window as f64;
    let prev = mean(&records[n - 2 * window..n - window]);
    let cur = mean(&records[n - window..]);
    (cur - prev).abs() <= rel_tol * prev.abs()
}

fn train_loop(
    mut model: Model,
    ds: &Dataset,
    stage: TrainStage,
    cfg: &TrainConfig,
    max_iters: usize,
) -> Result<TrainOutcome> {
    let strategy = match stage {
        TrainStage::Pretrain => RpnStrategy::BaseOnly,
        TrainStage::Finetune => cfg.rpn_strategy,
    };
    model.params.set_trainable_layers(stage.trainable_layers());
    let feats = if max_iters > 0 { dataset_features(&model, ds)? } else { Vec::new() };
    let gts: Vec<&GroundTruth> = ds.manifest.items.iter().map(|r| &r.gt).collect();
    let loss_cfg = cfg.loss();
    let start = Instant::now();
    let mut velocity = Velocity::new();
    let mut records = Vec::new();
    let mut stop = StopReason::MaxIters;
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let fail = |iteration: usize, reason: String| Error::Training {
        stage: stage_name(stage).into(),
        iteration,
        reason,
    };

    for it in 0..max_iters {
        let mut batch = Vec::with_capacity(cfg.images_per_batch);
        while batch.len() < cfg.images_per_batch.min(ds.images.len()) {
            if order.is_empty() {
                order = (0..ds.images.len()).collect();
                order.shuffle(&mut stream_rng(cfg.seed, streams::BATCHES, epoch));
                order.reverse();
                epoch += 1;
            }
            batch.push(order.pop().expect("refilled"));
        }
        let bf: Vec<&ImageFeatures> = batch.iter().map(|&i| &feats[i]).collect();
        let bg: Vec<&GroundTruth> = batch.iter().map(|&i| gts[i]).collect();
        let seed = derive_seed(cfg.seed, streams::SAMPLING, it as u64);
        let mb = build_minibatch(&model, &bf, &bg, strategy, cfg, seed)?;
        let (loss, grads) = compute_gradients(&model, &mb, stage, &loss_cfg).map_err(|e| match e {
            Error::Numeric(m) => fail(it, m),
            e => e,
        })?;
        if !grads.grads.values().all(|g| g.is_finite()) {
            return Err(fail(it, "non-finite gradient".into()));
        }
        sgd_step(&mut model.params, &grads, cfg.lr, cfg.momentum, &mut velocity)?;
        records.push(TrainRecord {
            iteration: it,
            stage,
            seed: cfg.seed,
            lr: cfg.lr,
            loss,
            wall_clock: start.elapsed().as_secs_f64(),
        });
        if converged(&records, cfg.convergence.window, cfg.convergence.rel_tol) {
            stop = StopReason::Converged;
            break;
        }
    }
    model.params.set_trainable_layers(&[]);
    Ok(TrainOutcome {
        model,
        log: TrainLog {
            stage,
            seed: cfg.seed,
            records,
            stop,
        },
    })
}

/// Trains the base detector's objectness, RPN regression, classifier and
/// box regressor on the annotated base instances.
pub fn pretrain(ds: &Dataset, arch: &ArchConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.manifest.mode != DatasetMode::BaseTrain {
        return param("pretraining needs a base-train dataset");
    }
    if ds.manifest.side != arch.image_side {
        return param(format!("dataset side {} differs from model side {}", ds.manifest.side, arch.image_side));
    }
    let feat_seed = derive_seed(cfg.seed, streams::FEATURIZER, 0);
    let mut model = Model::init_base(ds.manifest.split.clone(), arch.clone(), feat_seed, cfg.seed)?;
    let n = ds.images.len().min(CALIBRATION_IMAGES);
    let pixels: Vec<&[f64]> = ds.images[..n].iter().map(|im| im.pixels.as_slice()).collect();
    let rois: Vec<Vec<BBox>> = ds.manifest.items[..n].iter().map(|r| r.gt.annotated_only().0).collect();
    model.calibrate(&pixels, &rois)?;
    let mut out = train_loop(model, ds, TrainStage::Pretrain, cfg, cfg.pretrain_iters)?;
    out.model.set_stage(Stage::Pretrained);
    Ok(out)
}

/// Extends a pretrained detector with novel heads and trains only the
/// finetuned objectness layer, classifier and box regressor.
pub fn finetune(base: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if base.stage() != Stage::Pretrained || base.is_retentive() {
        return Err(Error::State("finetuning needs a pretrained base detector".into()));
    }
    if ds.manifest.mode != DatasetMode::Kshot {
        return param("finetuning needs a k-shot dataset");
    }
    if ds.manifest.split != *base.split() {
        return param("dataset class split differs from the model's");
    }
    let covered: BTreeSet<ClassId> = ds
        .manifest
        .annotated_histogram()
        .into_iter()
        .filter(|&(_, n)| n > 0)
        .map(|(c, _)| c)
        .collect();
    let all: BTreeSet<ClassId> = base.split().canonical_ids().collect();
    if covered != all {
        return param("k-shot dataset does not cover every base and novel class");
    }
    let model = base.attach_novel_heads(cfg.novel_head, cfg.random_rpn_init, cfg.seed)?;
    let mut out = train_loop(model, ds, TrainStage::Finetune, cfg, cfg.finetune_iters)?;
    out.model.set_stage(Stage::Finetuned);
    debug_assert_eq!(out.model.params.digest(Some(&layers::BASE)), base.params.digest(Some(&layers::BASE)));
    Ok(out)
}
