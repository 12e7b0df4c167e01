use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nrt::boundary_operators::{assemble_r, DirichletCorrector, OperatorParams};
use nrt::forward_solver::TimeGrid;
use nrt::geometry::{discretize, RadialShape};
use nrt::par::Exec;
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn corrector(c: &mut Criterion) {
    let omega = discretize(&RadialShape::circle([0.0, 0.0], 1.0), 32).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let mut g = c.benchmark_group("dirichlet_corrector");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| DirichletCorrector::new(black_box(&omega), &grid, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn r_operator(c: &mut Criterion) {
    let omega = discretize(&RadialShape::circle([0.0, 0.0], 1.0), 32).unwrap();
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let corr = DirichletCorrector::new(&omega, &grid, 3, Exec::Parallel).unwrap();
    let params = OperatorParams { n_g: 16, ..OperatorParams::default() };
    let test = RadialShape::circle([0.2, 0.1], 0.4);
    let mut g = c.benchmark_group("assemble_r");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| assemble_r(black_box(&test), &omega, &grid, &params, Some(&corr), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, corrector, r_operator);
criterion_main!(benches);
