use std::hint::black_box;

use bayescomp::compress::kmeans_1d;
use bayescomp::layers::Rng;
use bayescomp::train::{train_step, Adam};
use bayescomp::{conv2d, Architecture, Model, Padding, Prior, Tensor, TrainConfig};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng as _, SeedableRng};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(1);
    let a = random(&[100, 784], &mut rng);
    let b = random(&[784, 300], &mut rng);
    c.bench_function("matmul 100x784x300", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(2);
    let x = random(&[100, 28, 28, 1], &mut rng);
    let k = random(&[5, 5, 1, 20], &mut rng);
    c.bench_function("conv2d 100x28x28x1 5x5x20", |bench| {
        bench.iter(|| conv2d(black_box(&x), black_box(&k), Padding::Valid).unwrap())
    });
}

fn train_steps(c: &mut Criterion) {
    let arch = Architecture::lenet_300_100();
    let cfg = TrainConfig::default();
    let mut rng = Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[cfg.batch_size, 784], |_| rng.random_range(0.0..1.0));
    let labels: Vec<usize> = (0..cfg.batch_size).map(|i| i % 10).collect();
    let mut group = c.benchmark_group(format!("train step LeNet-300-100 batch {}", cfg.batch_size));
    group.sample_size(20);
    for prior in [Prior::Gnj, Prior::Ghs] {
        let mut model = Model::init(&arch, prior, 1).unwrap();
        let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
        group.bench_function(prior.to_string(), |bench| {
            bench.iter(|| train_step(&mut model, &mut adam, &x, &labels, 60_000, 1.0, &cfg, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn kmeans(c: &mut Criterion) {
    let mut rng = Rng::seed_from_u64(4);
    let values: Vec<f64> = (0..30_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("kmeans_1d 30000 values k=32", |bench| {
        bench.iter(|| kmeans_1d(black_box(&values), 32, 50, 0).unwrap())
    });
}

criterion_group!(benches, matmul, conv, train_steps, kmeans);
criterion_main!(benches);
