use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nowcast_bench::{fixture, matrix};
use nowcast_core::graph::{chebyshev_basis, laplacian, scaled_laplacian, AdjacencyConfig, build_adjacency};
use nowcast_core::model::{forward, Mode};
use nowcast_core::tensor::matmul;
use nowcast_core::trainer::{batch_gradients, make_windows};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 256] {
        let (a, b) = (matrix(n, n), matrix(n, n));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_graph(c: &mut Criterion) {
    let f = fixture(16);
    let nodes = f.graph.nodes().to_vec();
    c.bench_function("adjacency_50", |b| {
        b.iter(|| build_adjacency(black_box(&nodes), &AdjacencyConfig::default()).unwrap())
    });
    let l = laplacian(f.graph.adjacency()).unwrap();
    c.bench_function("cheb_basis_50_k3", |b| {
        b.iter(|| {
            let (lt, _) = scaled_laplacian(black_box(&l)).unwrap();
            chebyshev_basis(&lt, 3).unwrap()
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for width in [16, 32] {
        let f = fixture(width);
        let x = f.data.window(100, 12).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", width), &width, |b, _| {
            b.iter(|| forward(black_box(&x), &f.graph, &f.params).unwrap())
        });
        let windows = make_windows(f.data.n_steps(), 12, 1, 288).unwrap();
        let batch = &windows.train[..8];
        group.bench_with_input(BenchmarkId::new("forward_backward_batch8", width), &width, |b, _| {
            b.iter(|| batch_gradients(&f.data, &f.graph, &f.params, batch, &[1.0; 3], &mut Mode::Eval).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_graph, bench_model);
criterion_main!(benches);
