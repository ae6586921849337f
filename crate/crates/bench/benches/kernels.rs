use std::hint::black_box;

use composer_bench::{random_map, toy_job};
use composer_core::guidance::GuidanceObjective;
use composer_core::reinit::{best_crop, reinitialize};
use criterion::{criterion_group, criterion_main, Criterion};

fn denoiser(c: &mut Criterion) {
    let (p, z) = toy_job(42);
    let t = p.schedule.steps();
    c.bench_function("denoiser_forward", |b| {
        b.iter(|| p.forward(black_box(&z), t).unwrap())
    });
    c.bench_function("guidance_loss_and_grad", |b| {
        b.iter(|| p.evaluate(black_box(&z), t).unwrap())
    });
    c.bench_function("reinitialize", |b| {
        b.iter(|| reinitialize(black_box(42), &p).unwrap())
    });
}

fn crops(c: &mut Criterion) {
    let map = random_map(1, 64, 64);
    c.bench_function("best_crop_64x64", |b| {
        b.iter(|| best_crop(black_box(&map), 20, 12).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = denoiser, crops
}
criterion_main!(benches);
