use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memctrl_core::analytic::{nonexistence_instance, scalar_instance};
use memctrl_core::{gradient_at, minimize, pmp_residual_of, relaxation_gap, solve_forward, FwOptions, TriangularPlan};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for n in [100, 400, 1000] {
        let p = scalar_instance(0.5, 1.0, 0.5, n).unwrap();
        let dense = TriangularPlan::uniform(p.grid());
        let sparse = TriangularPlan::recent(p.grid());
        group.bench_with_input(BenchmarkId::new("uniform", n), &n, |b, _| {
            b.iter(|| solve_forward(black_box(&p), black_box(&dense)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recent", n), &n, |b, _| {
            b.iter(|| solve_forward(black_box(&p), black_box(&sparse)).unwrap())
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("gradient");
    for n in [100, 400] {
        let p = scalar_instance(0.5, 1.0, 0.5, n).unwrap();
        let plan = TriangularPlan::uniform(p.grid());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| gradient_at(black_box(&p), black_box(&plan)).unwrap())
        });
    }
    group.finish();
}

fn optimize(c: &mut Criterion) {
    let mut group = c.benchmark_group("minimize");
    group.sample_size(10);
    for n in [50, 200] {
        let p = scalar_instance(0.5, 1.0, 0.5, n).unwrap();
        group.bench_with_input(BenchmarkId::new("scalar", n), &n, |b, _| {
            b.iter(|| minimize(black_box(&p), &FwOptions::default(), None).unwrap())
        });
    }
    let inst = nonexistence_instance(40).unwrap();
    let opts = FwOptions { max_iters: 100, n_starts: 0, ..FwOptions::default() };
    group.bench_function("nonexistence/40", |b| b.iter(|| minimize(black_box(&inst.problem), &opts, None).unwrap()));
    group.finish();
}

fn checks(c: &mut Criterion) {
    let p = scalar_instance(0.5, 1.0, 0.8, 200).unwrap();
    let plan = TriangularPlan::uniform(p.grid());
    c.bench_function("pmp_residual/200", |b| b.iter(|| pmp_residual_of(black_box(&p), &plan, false).unwrap()));
    let inst = nonexistence_instance(200).unwrap();
    let half = inst.plan();
    c.bench_function("relaxation_gap/200", |b| {
        b.iter(|| relaxation_gap(black_box(&inst.problem), &half, &[1, 2, 4, 8]).unwrap())
    });
}

criterion_group!(benches, forward, gradient, optimize, checks);
criterion_main!(benches);
