//! Sampling, neighbor search and full forward passes.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use slnet_bench::cloud;
use slnet_core::backbone::ModelConfig;
use slnet_core::geom::{fps, knn};
use slnet_core::Model;

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("fps");
    for n in [1024, 2048] {
        let pts = cloud(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, pts| {
            b.iter(|| fps(pts, n / 2).unwrap())
        });
    }
    group.finish();
}

fn neighbors(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    for k in [8, 24] {
        let pts = cloud(1024, 2);
        let centers = &pts[..512];
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| knn(centers, &pts, k).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for (name, cfg) in [("slnet_s", ModelConfig::slnet_s()), ("slnet_m", ModelConfig::slnet_m())] {
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let pts = cloud(1024, 3);
        group.bench_function(name, |b| {
            b.iter(|| {
                let plan = model.plan(&pts, 0).unwrap();
                model.predict(&[&plan], None).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, neighbors, forward);
criterion_main!(benches);
