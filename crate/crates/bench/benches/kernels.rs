use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hyperada::autodiff::Tape;
use hyperada::ball::{self, BallConfig};
use hyperada::gradcheck::forward_loss;
use hyperada::ot::{self, Matrix};
use hyperada::proto::{self, frechet_mean};
use hyperada::{AblationConfig, Model, ModelConfig};
use hyperada_bench::{fixture_matrix, fixture_points};

fn geometry(c: &mut Criterion) {
    let mut group = c.benchmark_group("ball");
    for dim in [16, 256] {
        let cfg = BallConfig::hyperbolic(1.0, dim);
        let pts = fixture_points(2, &cfg, 1);
        group.bench_with_input(BenchmarkId::new("mobius_add", dim), &pts, |b, p| {
            b.iter(|| ball::mobius_add(black_box(&p[0]), black_box(&p[1]), &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("dist", dim), &pts, |b, p| {
            b.iter(|| ball::dist(black_box(&p[0]), black_box(&p[1]), &cfg).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("log_exp", dim), &pts, |b, p| {
            b.iter(|| {
                ball::exp_origin(&ball::log_origin(black_box(&p[0]), &cfg).unwrap(), &cfg).unwrap()
            })
        });
    }
    group.finish();
}

fn transport(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    for n in [16, 64] {
        let cost = fixture_matrix(5, n, 10.0, 2);
        let cost = Matrix::new(5, n, cost.data.iter().map(|v| v.abs()).collect()).unwrap();
        let a = ot::uniform(5);
        let b = ot::uniform(n);
        group.bench_with_input(BenchmarkId::new("5xn", n), &cost, |bench, m| {
            bench.iter(|| {
                ot::sinkhorn(black_box(m), &a, &b, ot::DEFAULT_EPS_OT, ot::DEFAULT_ITERS).unwrap()
            })
        });
    }
    group.finish();
}

fn prototypes(c: &mut Criterion) {
    let cfg = BallConfig::hyperbolic(1.0, 32);
    let pts = fixture_points(64, &cfg, 3);
    c.bench_function("frechet_mean/64x32", |b| {
        b.iter(|| {
            frechet_mean(
                black_box(&pts),
                &cfg,
                proto::DEFAULT_MAX_ITER,
                proto::DEFAULT_TOL,
            )
            .unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let model = Model::new(
        ModelConfig::desk(),
        AblationConfig::default(),
        BallConfig::default(),
        4,
    )
    .unwrap();
    let frames = fixture_matrix(50, 32, 1.0, 5);
    c.bench_function("model/forward_50x32", |b| {
        b.iter(|| model.forward(black_box(&frames)).unwrap())
    });
    c.bench_function("model/forward_backward_50x32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, true);
            let loss = forward_loss(&model, &frames, 1, &mut tape, bound.vars()).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

criterion_group!(benches, geometry, transport, prototypes, network);
criterion_main!(benches);
