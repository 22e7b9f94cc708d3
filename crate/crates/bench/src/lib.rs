//! Shared fixtures for the criterion benches: a small trained detector and
//! the datasets it was trained on.

use rand::Rng;
use retentive::detector::{DetectConfig, ImageFeatures, Model};
use retentive::experiment::ExperimentConfig;
use retentive::rng::stream_rng;
use retentive::synthgen::{build_base_dataset, build_kshot_dataset, build_test_dataset, split_classes};
use retentive::trainer::{dataset_features, finetune, pretrain};
use retentive::{BBox, Dataset};

pub struct Fixture {
    pub config: ExperimentConfig,
    pub base: Dataset,
    pub kshot: Dataset,
    pub test: Dataset,
    pub pretrained: Model,
    pub retentive: Model,
    pub test_features: Vec<ImageFeatures>,
    pub detect: DetectConfig,
}

impl Fixture {
    /// Short schedules on a reduced benchmark; timings, not accuracy, matter here.
    pub fn new() -> Fixture {
        let mut config = ExperimentConfig::default();
        config.data.base_images = 64;
        config.data.test_images = 16;
        config.train.pretrain_iters = 60;
        config.train.finetune_iters = 30;
        let seed = 0;
        let split = split_classes(config.data.num_classes, config.data.num_novel, seed).expect("split");
        let base = build_base_dataset(&split, &config.data, seed).expect("base data");
        let kshot = build_kshot_dataset(&split, config.data.shots, &config.data, seed).expect("k-shot data");
        let test = build_test_dataset(&split, &config.data, seed).expect("test data");
        let pretrained = pretrain(&base, &config.arch, &config.train).expect("pretrain").model;
        let retentive = finetune(&pretrained, &kshot, &config.train).expect("finetune").model;
        let test_features = dataset_features(&retentive, &test).expect("features");
        Fixture {
            detect: config.detect.clone(),
            config,
            base,
            kshot,
            test,
            pretrained,
            retentive,
            test_features,
        }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture::new()
    }
}

/// `n` boxes inside a `side` x `side` image, clustered so that NMS has work to do.
pub fn random_boxes(n: usize, side: f64, seed: u64) -> (Vec<BBox>, Vec<f64>) {
    let mut rng = stream_rng(seed, 0, 0);
    let centres: Vec<(f64, f64)> = (0..8).map(|_| (rng.random_range(8.0..side - 8.0), rng.random_range(8.0..side - 8.0))).collect();
    let boxes = (0..n)
        .map(|_| {
            let (cx, cy) = centres[rng.random_range(0..centres.len())];
            let (w, h) = (rng.random_range(6.0..20.0), rng.random_range(6.0..20.0));
            let (x, y) = (cx + rng.random_range(-3.0..3.0), cy + rng.random_range(-3.0..3.0));
            BBox::new((x - w / 2.0).max(0.0), (y - h / 2.0).max(0.0), (x + w / 2.0).min(side), (y + h / 2.0).min(side))
        })
        .collect();
    let scores = (0..n).map(|_| rng.random()).collect();
    (boxes, scores)
}
