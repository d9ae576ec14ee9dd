use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dlpr_core::datasets::{render, ProceduralKind};
use dlpr_core::optics::{simulate_measurement, NoiseSpec, PropagationConfig, Propagator};
use std::hint::black_box;

fn propagate(c: &mut Criterion) {
    let mut group = c.benchmark_group("propagate");
    for pad in [1usize, 2, 4] {
        let cfg = PropagationConfig { pad_factor: pad, ..PropagationConfig::default() };
        let prop = Propagator::new(&cfg).unwrap();
        let img = render(ProceduralKind::Blobs, cfg.grid, 0, 0);
        group.bench_with_input(BenchmarkId::new("measure_64", pad), &img, |b, img| {
            b.iter(|| prop.measure(black_box(img), &NoiseSpec::default()).unwrap())
        });
    }
    group.finish();
}

fn one_shot(c: &mut Criterion) {
    // includes building the transfer function
    let cfg = PropagationConfig::default();
    let img = render(ProceduralKind::Gratings, cfg.grid, 0, 0);
    c.bench_function("simulate_measurement_64", |b| {
        b.iter(|| simulate_measurement(black_box(&img), &cfg, &NoiseSpec::default()).unwrap())
    });
}

criterion_group!(benches, propagate, one_shot);
criterion_main!(benches);
