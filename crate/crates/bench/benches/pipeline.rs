use std::hint::black_box;

use a2_core::autodiff::Tensor;
use a2_core::network::{forward_pair, ModelWeights, NetworkConfig};
use a2_core::pose::{localize, RansacConfig};
use a2_core::synth::{generate_scene, inject_outliers, SynthConfig};
use a2_core::transport::{augment_dustbins, cost_matrix, sinkhorn, DEFAULT_SINKHORN_ITERS};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("sinkhorn");
    for (m, n) in [(64, 80), (256, 256)] {
        let cost = cost_matrix(&random_features(m, 32, &mut rng), &random_features(n, 32, &mut rng)).unwrap();
        let scores = augment_dustbins(&cost, 1.0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{n}")), &scores, |b, s| {
            b.iter(|| sinkhorn(black_box(s), DEFAULT_SINKHORN_ITERS).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (n, d) in [(100, 32), (256, 128)] {
        let scene = generate_scene(&SynthConfig { n_points: n, seed: 1, ..SynthConfig::default() }).unwrap();
        let w = ModelWeights::init(&NetworkConfig { d, ..NetworkConfig::default() }, 0).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("n{n}_d{d}")), |b| {
            b.iter(|| forward_pair(black_box(&scene), &w).unwrap())
        });
    }
    group.finish();
}

fn bench_pnp(c: &mut Criterion) {
    let base = generate_scene(&SynthConfig {
        n_points: 200,
        inlier_fraction: 1.0,
        seed: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("pnp_ransac");
    for ratio in [0.0, 0.5] {
        let scene = inject_outliers(&base, ratio, 3).unwrap();
        // Pre-injection pairs: replaced keypoints now pair with the wrong point.
        let corrs = base.gt_matches.clone();
        let cfg = RansacConfig::default();
        group.bench_function(BenchmarkId::from_parameter(ratio), |b| {
            b.iter(|| localize(black_box(&scene), &corrs, &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sinkhorn, bench_forward, bench_pnp);
criterion_main!(benches);
