//! Compares the rayon data-parallel convolution path against the
//! always-sequential fallback on training-sized workloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ifes_core::adam::AdamHyper;
use ifes_core::loss::LossConfig;
use ifes_core::net::{build_network, forward, optimizer_for, train_step, NetConfig, Variant};
use ifes_core::tensor::{conv2d_forward, conv2d_forward_seq, ConvLayer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(
        b,
        c,
        h,
        w,
        (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_forward_64x64_32ch");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random_tensor(&mut rng, 1, 32, 64, 64);
    let weights = random_tensor(&mut rng, 32, 32, 3, 3);
    let layer = ConvLayer::new(
        weights,
        vec![0.0; 32],
        ifes_core::tensor::Activation::ReLU,
    )
    .unwrap();

    group.bench_function(BenchmarkId::new("parallel", 32), |b| {
        b.iter(|| conv2d_forward(&input, &layer).unwrap())
    });
    group.bench_function(BenchmarkId::new("sequential", 32), |b| {
        b.iter(|| conv2d_forward_seq(&input, &layer).unwrap())
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_tiny_64x64");
    group.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let i1 = random_tensor(&mut rng, 1, 1, 64, 64);
    let i2 = random_tensor(&mut rng, 1, 1, 64, 64);
    let cfg = NetConfig::new(3, 8, Variant::Full, 1).unwrap();
    group.bench_function("forward", |b| {
        let net = build_network(cfg.clone()).unwrap();
        b.iter(|| forward(&net, &i1, &i2).unwrap())
    });
    group.bench_function("train_step", |b| {
        let mut net = build_network(cfg.clone()).unwrap();
        let mut opt = optimizer_for(&net, AdamHyper::default());
        let loss_cfg = LossConfig::default();
        b.iter(|| train_step(&mut net, &mut opt, &i1, &i2, &loss_cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_train_step);
criterion_main!(benches);
