//! Sequential vs data-parallel trajectory generation and Monte-Carlo estimation.
//!
//! `cargo bench -p flowlab --bench parallel`; build with `--no-default-features` to time the
//! sequential fallback of every `exec` helper.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use flowlab::data::synthetic;
use flowlab::dynamics::{generate_endpoint, make_grid, GridKind, Method, DEFAULT_SNAP_TOL};
use flowlab::exec;
use flowlab::field::OptimalField;
use flowlab::geometry::estimate_nonconcentration;
use flowlab::rng::sample_standard_gaussian;
use flowlab::RngSpec;

fn endpoints(c: &mut Criterion) {
    let data = synthetic::sparse(RngSpec::new(0, 10), 6, 2, 10.0, 5.0).unwrap();
    let field = OptimalField::ot(data.clone());
    let grid = make_grid(GridKind::Geometric, 200, 1e-4).unwrap();
    let n = 512;
    let x0 = sample_standard_gaussian(RngSpec::new(0, 11), 2, n).unwrap();
    let one = |j: usize| {
        generate_endpoint(&field, &x0.column(j).into_owned(), &grid, &data, DEFAULT_SNAP_TOL, Method::Rk4).unwrap()
    };

    let mut g = c.benchmark_group("endpoints_512");
    g.sample_size(10);
    g.bench_function("seq", |b| b.iter(|| exec::map_indexed_seq(n, one)));
    let max = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut counts = vec![1, max];
    counts.dedup();
    for threads in counts {
        g.bench_with_input(BenchmarkId::new("par", threads), &threads, |b, &t| {
            b.iter(|| exec::with_threads(t, || exec::map_indexed(n, one)).unwrap())
        });
    }
    g.finish();
}

fn nonconcentration(c: &mut Criterion) {
    let data = synthetic::sparse(RngSpec::new(0, 10), 6, 2, 10.0, 5.0).unwrap();
    let mut g = c.benchmark_group("nonconcentration_20k");
    g.sample_size(10);
    let max = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut counts = vec![1, max];
    counts.dedup();
    for threads in counts {
        g.bench_with_input(BenchmarkId::new("threads", threads), &threads, |b, &t| {
            b.iter(|| {
                exec::with_threads(t, || estimate_nonconcentration(0.9, 0.99, &data, 20_000, RngSpec::new(0, 30)).unwrap())
                    .unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, endpoints, nonconcentration);
criterion_main!(benches);
