use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gdnls::degeneracy::{det_contrast, find_z0, sigma_grid, z0_sweep};
use gdnls::functionals::d_surface;
use gdnls::grid::GridSpec;
use gdnls::par::Execution;
use gdnls::soliton::SolitonParams;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn z0_curve(c: &mut Criterion) {
    let sigmas = sigma_grid(1.05, 1.95, 19);
    let mut group = c.benchmark_group("z0_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &sigmas, |b, s| b.iter(|| z0_sweep(black_box(s), exec)));
    }
    group.finish();
}

fn surface(c: &mut Criterion) {
    let params = SolitonParams::new(1.5, 1.0, 2.0 * find_z0(1.5).unwrap()).unwrap();
    let mut group = c.benchmark_group("d_surface");
    group.sample_size(10);
    for count in [1024, 2048] {
        let grid = GridSpec::new(80.0, count).unwrap();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, count), &grid, |b, g| {
                b.iter(|| d_surface(black_box(&params), g, None, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn contrast(c: &mut Criterion) {
    let base = GridSpec::new(80.0, 2048).unwrap();
    let mut group = c.benchmark_group("det_contrast");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| b.iter(|| det_contrast(1.5, 1.0, 0.05, black_box(&base), exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, z0_curve, surface, contrast);
criterion_main!(benches);
