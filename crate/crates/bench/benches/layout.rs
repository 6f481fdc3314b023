use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use icheck_bench::layout_pairs;
use icheck_core::{apply_plan, redistribution_plan};
use rand::{RngCore, SeedableRng};

const ELEM: usize = 8;

fn plans(c: &mut Criterion) {
    let mut group = c.benchmark_group("redistribution_plan");
    for n in [10_000u64, 1_000_000] {
        for (name, old, new) in layout_pairs(n) {
            group.throughput(Throughput::Elements(n));
            group.bench_with_input(BenchmarkId::new(name, n), &(old, new), |b, (o, n)| {
                b.iter(|| redistribution_plan(*o, *n).unwrap())
            });
        }
    }
    group.finish();
}

fn apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_plan");
    let n = 1_000_000u64;
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    for (name, old, new) in layout_pairs(n) {
        let plan = redistribution_plan(old, new).unwrap();
        let sources: Vec<Vec<u8>> = old
            .counts()
            .into_iter()
            .map(|c| {
                let mut v = vec![0u8; c as usize * ELEM];
                rng.fill_bytes(&mut v);
                v
            })
            .collect();
        group.throughput(Throughput::Bytes(n * ELEM as u64));
        group.bench_function(name, |b| b.iter(|| apply_plan(&plan, &sources, ELEM).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, plans, apply);
criterion_main!(benches);
