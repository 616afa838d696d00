//! Dense kernel benchmarks: matrix multiply, row softmax, layer norm, and
//! the fused forward/backward pass at the default model width.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uvr_core::fusion::{backward, fuse_with_cache, grad_fixture};
use uvr_core::tensor::{layer_norm, softmax_rows, LayerNormParams, LN_EPS};
use uvr_core::{GateMode, Matrix};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Matrix::uniform(64, 64, -1.0, 1.0, &mut rng);
    let b = Matrix::uniform(64, 64, -1.0, 1.0, &mut rng);
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn bench_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Matrix::uniform(64, 64, -4.0, 4.0, &mut rng);
    c.bench_function("softmax_rows_64x64", |bench| {
        bench.iter(|| softmax_rows(black_box(&x)))
    });
}

fn bench_layer_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::uniform(64, 64, -1.0, 1.0, &mut rng);
    let params = LayerNormParams::identity(64);
    c.bench_function("layer_norm_64x64", |bench| {
        bench.iter(|| layer_norm(black_box(&x), &params, LN_EPS).unwrap())
    });
}

fn bench_fusion(c: &mut Criterion) {
    let fix = grad_fixture(4, 4, 64, 8, 42, GateMode::Learned).unwrap();
    c.bench_function("fusion_forward_n4_m4_d64", |bench| {
        bench.iter(|| {
            fuse_with_cache(
                black_box(&fix.sentence),
                &fix.ranked,
                &fix.features,
                &fix.encoder,
                &fix.params,
                fix.mode,
            )
            .unwrap()
        })
    });

    let (_, cache) = fuse_with_cache(
        &fix.sentence,
        &fix.ranked,
        &fix.features,
        &fix.encoder,
        &fix.params,
        fix.mode,
    )
    .unwrap();
    c.bench_function("fusion_backward_n4_m4_d64", |bench| {
        bench.iter(|| backward(black_box(&cache), &fix.encoder, &fix.params, &fix.upstream).unwrap())
    });
}

criterion_group!(kernels, bench_matmul, bench_softmax, bench_layer_norm, bench_fusion);
criterion_main!(kernels);
