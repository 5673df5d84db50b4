use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pego_bench::training_fixture;
use pego_core::autograd::backward;
use pego_core::numerics::{matmul, svd};
use pego_core::trainer::{adam_step, AdamState};
use pego_core::Rng;

fn linear_algebra(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a = rng.gaussian_matrix(32, 64, 1.0);
    let b = rng.gaussian_matrix(64, 32, 1.0);
    c.bench_function("matmul 32x64x32", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });
    let m = rng.gaussian_matrix(32, 32, 1.0);
    c.bench_function("svd 32x32", |bench| bench.iter(|| svd(black_box(&m)).unwrap()));
}

fn training(c: &mut Criterion) {
    let (model, batch) = training_fixture();
    c.bench_function("backward canonical batch", |bench| {
        bench.iter(|| backward(black_box(&model), black_box(&batch), 1e-3).unwrap())
    });
    c.bench_function("backward + adam step", |bench| {
        let mut m = model.clone();
        let mut state = AdamState::new();
        bench.iter(|| {
            let (_, grads) = backward(&m, &batch, 1e-3).unwrap();
            adam_step(&mut m, &grads, &mut state, 5e-4).unwrap();
        })
    });
}

criterion_group!(benches, linear_algebra, training);
criterion_main!(benches);
