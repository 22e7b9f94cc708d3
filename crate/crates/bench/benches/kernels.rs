use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use retentive::detector::{head_logits, roi_features, HeadKind};
use retentive::losses::{consistency_loss, ConsistencyVariant};
use retentive::ops::{cosine_logits, iou, nms, softmax};
use retentive::Tensor;
use retentive_bench::{random_boxes, Fixture};

fn bench_boxes(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [64, 256, 1024] {
        let (boxes, scores) = random_boxes(n, 64.0, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| nms(black_box(&boxes), black_box(&scores), 0.7)));
    }
    group.finish();

    let (boxes, _) = random_boxes(256, 64.0, 1);
    c.bench_function("iou/all_pairs_256", |b| {
        b.iter(|| {
            let mut acc = 0.0;
            for a in &boxes {
                for o in &boxes {
                    acc += iou(a, o);
                }
            }
            acc
        })
    });
}

fn table(rows: usize, cols: usize, shift: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.37 + shift).sin() * 3.0).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn bench_heads(c: &mut Criterion) {
    let logits = table(512, 13, 0.0);
    c.bench_function("softmax/512x13", |b| b.iter(|| softmax(black_box(&logits)).unwrap()));

    let feats = table(512, 256, 0.5);
    let weights = table(13, 256, 1.5);
    c.bench_function("cosine_logits/512x256x13", |b| b.iter(|| cosine_logits(black_box(&feats), black_box(&weights), 7.0).unwrap()));

    let base_cols: Vec<usize> = (0..8).collect();
    let p_n = softmax(&table(512, 13, 2.0)).unwrap();
    let p_b = softmax(&table(512, 13, 3.0)).unwrap();
    let mut group = c.benchmark_group("consistency/512");
    for v in [ConsistencyVariant::Kldiv, ConsistencyVariant::L1, ConsistencyVariant::Cos] {
        group.bench_function(format!("{v:?}").to_lowercase(), |b| b.iter(|| consistency_loss(black_box(&p_n), black_box(&p_b), &base_cols, v).unwrap()));
    }
    group.finish();
}

fn bench_roi(c: &mut Criterion) {
    let fx = Fixture::new();
    let feats = &fx.test_features[0];
    let (boxes, _) = random_boxes(64, fx.config.arch.image_side as f64, 2);
    c.bench_function("roi_features/64", |b| b.iter(|| roi_features(&feats.feat, black_box(&boxes), &fx.retentive).unwrap()));
    let x = roi_features(&feats.feat, &boxes, &fx.retentive).unwrap();
    c.bench_function("head_logits/novel/64", |b| b.iter(|| head_logits(black_box(&x), &fx.retentive, HeadKind::Novel).unwrap()));
}

criterion_group!(benches, bench_boxes, bench_heads, bench_roi);
criterion_main!(benches);
