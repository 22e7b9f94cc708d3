use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use retentive::detector::{ImageFeatures, RpnStrategy};
use retentive::eval::{evaluate_with, RunMeta};
use retentive::losses::{compute_gradients, TrainStage};
use retentive::trainer::{build_minibatch, dataset_features};
use retentive::GroundTruth;
use retentive_bench::Fixture;

fn meta() -> RunMeta {
    RunMeta {
        seed: 0,
        model_digest: String::new(),
        dataset_digest: String::new(),
        config_digest: String::new(),
        settings: Default::default(),
    }
}

fn criterion_benchmark(c: &mut Criterion) {
    let fx = Fixture::new();
    let pixels = &fx.test.images[0].pixels;
    c.bench_function("features/one_image", |b| b.iter(|| fx.retentive.features(black_box(pixels)).unwrap()));

    let feats = &fx.test_features[0];
    c.bench_function("detect/one_image", |b| b.iter(|| fx.retentive.detect_features(black_box(feats), &fx.detect).unwrap()));

    let mut model = fx.retentive.clone();
    model.params.set_trainable_layers(TrainStage::Finetune.trainable_layers());
    let kshot = dataset_features(&model, &fx.kshot).unwrap();
    let bf: Vec<&ImageFeatures> = kshot.iter().take(2).collect();
    let bg: Vec<&GroundTruth> = (0..2).map(|i| fx.kshot.gt(i)).collect();
    let cfg = &fx.config.train;
    c.bench_function("train/minibatch", |b| b.iter(|| build_minibatch(&model, &bf, &bg, RpnStrategy::Max, cfg, 3).unwrap()));
    let mb = build_minibatch(&model, &bf, &bg, RpnStrategy::Max, cfg, 3).unwrap();
    let loss = cfg.loss();
    c.bench_function("train/gradients", |b| b.iter(|| compute_gradients(&model, black_box(&mb), TrainStage::Finetune, &loss).unwrap()));

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("test_set", |b| {
        b.iter(|| evaluate_with(&fx.retentive, &fx.test, &fx.test_features, &fx.detect, meta()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, criterion_benchmark);
criterion_main!(benches);
