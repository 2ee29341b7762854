use criterion::{criterion_group, criterion_main, Criterion};
use crowdtsc::clustering::{dbscan, kmeans, mean_shift};
use crowdtsc_bench::blobs;

fn bench_clustering(c: &mut Criterion) {
    let points = blobs(1000, 8, 50, 3);
    let mut group = c.benchmark_group("cluster_1000x50");
    group.sample_size(10);
    group.bench_function("kmeans_k8", |b| b.iter(|| kmeans(&points, 8, 100, 0).unwrap()));
    group.bench_function("dbscan", |b| b.iter(|| dbscan(&points, 9.0, 4).unwrap()));
    group.bench_function("mean_shift", |b| b.iter(|| mean_shift(&points[..300], 12.0).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_clustering);
criterion_main!(benches);
