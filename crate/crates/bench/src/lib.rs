//! Benchmarks for the inner loops of adaptation: per-feature EM, the
//! mixture-distance gradient and the network passes.

use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfharmony_core::divergence::{batch_responsibilities, loss_gradient};
use sfharmony_core::gmm::{em_fit, fit_feature_batch};
use sfharmony_core::{Architecture, EmConfig, SplitModel, WarmStartStore};

fn bimodal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let centre = if rng.random_bool(0.4) { -2.0 } else { 1.5 };
            centre + rng.random_range(-0.5..0.5)
        })
        .collect()
}

fn features(b: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_vec((b, n), bimodal(b * n, &mut rng)).expect("shape")
}

pub fn em(c: &mut Criterion) {
    let mut group = c.benchmark_group("em_fit");
    let cfg = EmConfig::default();
    for &n in &[5usize, 50, 500] {
        let samples = bimodal(n, &mut ChaCha8Rng::seed_from_u64(n as u64));
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("k2", n), &samples, |b, s| {
            b.iter(|| em_fit(black_box(s), 2, None, &cfg).expect("fit"))
        });
    }
    group.finish();

    let batch = features(50, 32, 3);
    c.bench_function("fit_feature_batch/b50x32", |b| {
        b.iter(|| fit_feature_batch(black_box(batch.view()), 2, &mut WarmStartStore::new(), &cfg).expect("fit"))
    });
}

pub fn gradient(c: &mut Criterion) {
    let cfg = EmConfig::default();
    let source =
        fit_feature_batch(features(500, 32, 1).view(), 2, &mut WarmStartStore::new(), &cfg).expect("fit").params;
    let mut group = c.benchmark_group("loss_gradient");
    for &b in &[5usize, 50, 500] {
        let x = features(b, 32, 2);
        let fit = fit_feature_batch(x.view(), 2, &mut WarmStartStore::new(), &cfg).expect("fit").params;
        let resp = batch_responsibilities(x.view(), &fit).expect("resp");
        let floors = vec![1e-6; 32];
        group.bench_with_input(BenchmarkId::from_parameter(b), &x, |bench, x| {
            bench.iter(|| loss_gradient(black_box(x.view()), &source, resp.view(), &floors).expect("grad"))
        });
    }
    group.finish();
}

pub fn network(c: &mut Criterion) {
    let model = SplitModel::mlp(&Architecture { input_dim: 256, hidden: vec![64], feature_dim: 32, output_dim: 11 }, 0);
    let mut group = c.benchmark_group("network");
    for &b in &[5usize, 50, 500] {
        let x = features(b, 256, 4);
        group.bench_with_input(BenchmarkId::new("forward", b), &x, |bench, x| {
            bench.iter(|| model.forward(black_box(x.view())).expect("forward"))
        });
        let pass = model.forward(x.view()).expect("forward");
        let g = Array2::<f64>::ones(pass.features.dim());
        group.bench_with_input(BenchmarkId::new("backward", b), &pass, |bench, pass| {
            bench.iter(|| model.backward(&pass.cache, None, Some(g.view())).expect("backward"))
        });
    }
    group.finish();
}
