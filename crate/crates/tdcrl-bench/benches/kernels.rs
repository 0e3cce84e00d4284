use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use tdcrl_bench::training_fixture;
use tdcrl_core::causal::{batch_gradients, infonce_from_outputs, LossConfig, LossGKind};
use tdcrl_core::eval::{mmd, Bandwidth};
use tdcrl_core::matrix::{normalize, DenseMatrix};
use tdcrl_core::nn::Mode;
use tdcrl_core::oracle::{random_scm, verify_identity};
use tdcrl_core::rng::substream;
use rand::Rng;

fn bench_batch_gradients(c: &mut Criterion) {
    let mut fx = training_fixture();
    let cfg = LossConfig {
        tau: 0.1,
        lambda: 3.0,
        loss_g: Some(LossGKind::Infonce),
    };
    c.bench_function("batch_gradients_128x4_es64_3layer", |b| {
        b.iter(|| {
            let (eval, grads) = batch_gradients(
                &mut fx.state.net,
                &fx.state.classifier,
                &fx.batch,
                &fx.state.dict,
                &fx.targets,
                &cfg,
                Mode::Train,
            )
            .unwrap();
            black_box((eval.objective, grads.classifier.bias[0]));
        })
    });
}

fn bench_infonce(c: &mut Criterion) {
    let mut rng = substream(616, "bench", 0);
    let n = 6;
    let es = 64;
    let outputs = DenseMatrix::from_vec(
        n,
        es,
        (0..n * es).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
    )
    .unwrap();
    let mut targets = DenseMatrix::zeros(n, es);
    for j in 0..n {
        let raw: Vec<f64> = (0..es).map(|_| rng.random_range(-1.0..1.0)).collect();
        targets.row_mut(j).copy_from_slice(&normalize(&raw).unwrap());
    }
    c.bench_function("infonce_grad_n6_es64", |b| {
        b.iter(|| black_box(infonce_from_outputs(&outputs, &targets, 0.1).unwrap().0))
    });
}

fn bench_mmd(c: &mut Criterion) {
    let mut rng = substream(616, "bench", 1);
    let a: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let b_set: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..64).map(|_| rng.random_range(-0.5..1.5)).collect())
        .collect();
    c.bench_function("mmd_median_200x200_d64", |b| {
        b.iter(|| black_box(mmd(&a, &b_set, Bandwidth::Median).unwrap()))
    });
}

fn bench_oracle(c: &mut Criterion) {
    let mut rng = substream(616, "bench", 2);
    let scm = random_scm(6, 6, 6, true, &mut rng).unwrap();
    c.bench_function("verify_identity_6x6x6", |b| {
        b.iter(|| black_box(verify_identity(&scm, 1e-12).unwrap().max_deviation))
    });
}

criterion_group!(
    benches,
    bench_batch_gradients,
    bench_infonce,
    bench_mmd,
    bench_oracle
);
criterion_main!(benches);
