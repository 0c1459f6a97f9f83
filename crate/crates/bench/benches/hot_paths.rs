use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use swapflow::analysis::noise_pca;
use swapflow::degradation::{degrade, DegradationSpec};
use swapflow::evaluation::feature_fid;
use swapflow::flowcore::{invert, sample, TimeGrid};
use swapflow::ImageTensor;
use swapflow_bench::{conditioning, face, features, gaussian, model};

fn render_and_degrade(c: &mut Criterion) {
    let f = face(64, 0);
    c.bench_function("render_64", |b| b.iter(|| face(64, black_box(3))));
    let mut g = c.benchmark_group("degrade_64");
    for spec in DegradationSpec::ablation_grid() {
        g.bench_with_input(BenchmarkId::from_parameter(spec), &spec, |b, &s| {
            b.iter(|| degrade(black_box(&f.image), &f.face_mask, s).unwrap())
        });
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let m = model(64);
    let faces = vec![face(64, 0)];
    let cond = conditioning(&m, &faces);
    let eps = gaussian(&[1, 3, 64, 64], 0);
    let x = ImageTensor::stack(&[&faces[0].image], &candle_core::Device::Cpu, candle_core::DType::F32).unwrap();
    let mut g = c.benchmark_group("euler_64");
    g.sample_size(10);
    for steps in [7, 14, 28] {
        let grid = TimeGrid::new(steps).unwrap();
        g.bench_with_input(BenchmarkId::new("sample", steps), &grid, |b, &grid| {
            b.iter(|| sample(&m, black_box(&eps), &cond, grid).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("invert", steps), &grid, |b, &grid| {
            b.iter(|| invert(&m, black_box(&x), &cond, grid).unwrap())
        });
    }
    g.finish();
}

fn statistics(c: &mut Criterion) {
    let (a, b2) = (features(200, 64, 1), features(200, 64, 2));
    c.bench_function("feature_fid_200x64", |b| b.iter(|| feature_fid(black_box(&a), &b2).unwrap()));
    let z = gaussian(&[64, 3, 64, 64], 3);
    let mut g = c.benchmark_group("noise_pca");
    g.sample_size(10);
    g.bench_function("64x3x64x64", |b| b.iter(|| noise_pca(black_box(&z)).unwrap()));
    g.finish();
}

criterion_group!(benches, render_and_degrade, sampling, statistics);
criterion_main!(benches);
