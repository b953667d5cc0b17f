use candle_core::{Tensor, Var};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spa_bench::{batch, classifier, generator, rotation};
use spa_core::attack::{spa_attack_with, AttackConfig, SpaToggles};
use spa_core::generator::{generate_trajectory, NoiseBudget};
use spa_core::manipulator::ApplyMode;
use spa_core::nn::conv::conv2d;

fn convolution(c: &mut Criterion) {
    let (x, _) = batch(100, 1);
    let w = Var::from_tensor(&(Tensor::ones((16, 1, 3, 3), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap() * 0.1).unwrap())
        .unwrap();
    let mut g = c.benchmark_group("conv2d-forward-backward");
    g.sample_size(20);
    g.bench_function("im2col", |b| {
        b.iter(|| conv2d(&x, w.as_tensor(), 2, 1).unwrap().sum_all().unwrap().backward().unwrap())
    });
    g.bench_function("candle", |b| {
        b.iter(|| x.conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap().sum_all().unwrap().backward().unwrap())
    });
    g.finish();
}

fn components(c: &mut Criterion) {
    let model = classifier();
    let man = rotation();
    let gen = generator();
    let mut g = c.benchmark_group("components");
    g.sample_size(10);
    for b in [10usize, 100] {
        let (x, y) = batch(b, 2);
        let alpha = Tensor::full(17.5f32, (b, 1), &candle_core::Device::Cpu).unwrap();
        g.bench_with_input(BenchmarkId::new("warp", b), &b, |bn, _| {
            bn.iter(|| man.apply(&x, &alpha, ApplyMode::Attack).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("input-gradient", b), &b, |bn, _| {
            bn.iter(|| model.input_gradient(&x, &y).unwrap())
        });
        let z = Tensor::zeros((b, gen.z_dim()), candle_core::DType::F32, &candle_core::Device::Cpu).unwrap();
        g.bench_with_input(BenchmarkId::new("noise-trajectory-t4", b), &b, |bn, _| {
            bn.iter(|| generate_trajectory(&gen, &x, &z, &y, &model, &NoiseBudget::even(0.1, 4)).unwrap())
        });
    }
    g.finish();
}

fn joint_attack(c: &mut Criterion) {
    let model = classifier();
    let man = rotation();
    let gen = generator();
    let (x, y) = batch(50, 3);
    let cfg = AttackConfig { iterations: 2, ..AttackConfig::default() };
    let mut g = c.benchmark_group("spa-attack");
    g.sample_size(10);
    g.bench_function("batch50-i2", |b| {
        b.iter(|| spa_attack_with(&x, &y, Some(&man), Some(&gen), &model, &cfg, SpaToggles::FULL).unwrap())
    });
    g.finish();
}

criterion_group!(benches, convolution, components, joint_attack);
criterion_main!(benches);
