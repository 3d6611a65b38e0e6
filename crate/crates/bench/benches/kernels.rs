//! Per-kernel throughput at the default architecture's working sizes.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use whatwhere::kernels::{
    batchnorm_bwd_train, batchnorm_fwd_train, conv2d_bwd, conv2d_fwd, fc_bwd, fc_fwd, maxpool_bwd,
    maxpool_fwd, softmax_ce_batch,
};
use whatwhere::rng::Rng;
use whatwhere::tensor::Tensor;

const BATCH: usize = 64;

fn t(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::gaussian(shape, 1.0, rng)
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let input = t(&[BATCH, 16, 16, 16], &mut rng);
    let weight = t(&[32, 16, 5, 5], &mut rng);
    let bias = t(&[32], &mut rng);
    c.bench_function("conv2d_fwd 64x16x16x16 k5", |b| {
        b.iter(|| conv2d_fwd(black_box(&input), &weight, &bias, 1, 2, false).unwrap())
    });
    let (out, cache) = conv2d_fwd(&input, &weight, &bias, 1, 2, true).unwrap();
    let cache = cache.unwrap();
    let grad = t(out.shape(), &mut rng);
    c.bench_function("conv2d_bwd 64x16x16x16 k5", |b| {
        b.iter(|| conv2d_bwd(black_box(&grad), input.shape(), &weight, &cache, 1, 2).unwrap())
    });
}

fn bench_pool(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let input = t(&[BATCH, 16, 32, 32], &mut rng);
    c.bench_function("maxpool_fwd 64x16x32x32 w2", |b| {
        b.iter(|| maxpool_fwd(black_box(&input), 2, 2).unwrap())
    });
    let (out, switches) = maxpool_fwd(&input, 2, 2).unwrap();
    let grad = t(out.shape(), &mut rng);
    c.bench_function("maxpool_bwd 64x16x32x32 w2", |b| {
        b.iter(|| maxpool_bwd(black_box(&grad), &switches, input.shape(), 2, 2).unwrap())
    });
}

fn bench_bn(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let input = t(&[BATCH, 32, 16, 16], &mut rng);
    let gamma = t(&[32], &mut rng);
    let beta = t(&[32], &mut rng);
    c.bench_function("batchnorm_fwd 64x32x16x16", |b| {
        b.iter(|| batchnorm_fwd_train(black_box(&input), &gamma, &beta, 1e-5).unwrap())
    });
    let (out, cache) = batchnorm_fwd_train(&input, &gamma, &beta, 1e-5).unwrap();
    let grad = t(out.shape(), &mut rng);
    c.bench_function("batchnorm_bwd 64x32x16x16", |b| {
        b.iter(|| batchnorm_bwd_train(black_box(&grad), &input, &gamma, &cache).unwrap())
    });
}

fn bench_fc(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let input = t(&[BATCH, 1024], &mut rng);
    let weight = t(&[128, 1024], &mut rng);
    let bias = t(&[128], &mut rng);
    c.bench_function("fc_fwd 64x1024->128", |b| {
        b.iter(|| fc_fwd(black_box(&input), &weight, Some(&bias)).unwrap())
    });
    let out = fc_fwd(&input, &weight, Some(&bias)).unwrap();
    let grad = t(out.shape(), &mut rng);
    c.bench_function("fc_bwd 64x1024->128", |b| {
        b.iter(|| fc_bwd(black_box(&grad), &input, &weight, true).unwrap())
    });
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = Rng::new(5);
    let logits = t(&[BATCH, 48], &mut rng);
    let labels: Vec<u32> = (0..BATCH as u32).map(|i| i % 48).collect();
    c.bench_function("softmax_ce_batch 64x48", |b| {
        b.iter(|| softmax_ce_batch(black_box(&logits), &labels).unwrap())
    });
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = bench_conv, bench_pool, bench_bn, bench_fc, bench_softmax
}
criterion_main!(kernels);
