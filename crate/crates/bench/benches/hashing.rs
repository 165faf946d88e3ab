use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hashfed_core::{expand, make_index_map, scatter_grad, Gamma};
use std::hint::black_box;

fn bench_expand_scatter(c: &mut Criterion) {
    let mut group = c.benchmark_group("index_map");
    for t in [2_048usize, 65_536, 1 << 20] {
        let map = make_index_map(t, Gamma::new(1, 4).unwrap(), 7);
        let real: Vec<f32> = (0..map.real_size()).map(|i| i as f32 * 1e-3).collect();
        let grad: Vec<f32> = (0..t).map(|i| (i % 17) as f32 * 1e-2).collect();
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("build", t), &t, |b, &t| {
            b.iter(|| make_index_map(black_box(t), Gamma::new(1, 4).unwrap(), 7))
        });
        group.bench_with_input(BenchmarkId::new("expand", t), &t, |b, _| {
            b.iter(|| expand(black_box(&real), &map).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("scatter", t), &t, |b, _| {
            b.iter(|| scatter_grad(black_box(&grad), &map).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_expand_scatter);
criterion_main!(benches);
