use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use posefuse::complete::{photometric_gradient, TrainView};
use posefuse::fusion::ConsensusReference;
use posefuse::render::{render_occupancy, render_rgb};
use posefuse::selection::{select_mixed_set, SelectionParams};
use posefuse::Sim3;
use posefuse_bench::two_pose_fixture;

fn render(c: &mut Criterion) {
    let ds = two_pose_fixture(16);
    let cam = ds.poses[0].cameras.poses()[3].clone();
    let mut g = c.benchmark_group("render");
    g.bench_function("occupancy_128", |b| {
        b.iter(|| render_occupancy(black_box(&ds.main_model), &cam).unwrap())
    });
    g.bench_function("rgb_128", |b| {
        b.iter(|| render_rgb(black_box(&ds.main_model), &cam).unwrap())
    });
    let main = &ds.poses[0];
    let view = TrainView {
        pose: cam.clone(),
        image: main.images[&cam.id].clone(),
        mask: main.masks[&cam.id].clone(),
    };
    g.bench_function("splat_gradient_128", |b| {
        b.iter(|| photometric_gradient(black_box(&ds.main_model), &view).unwrap())
    });
    g.finish();
}

fn consensus(c: &mut Criterion) {
    let ds = two_pose_fixture(16);
    let main = &ds.poses[0];
    let reference =
        ConsensusReference::new(&main.cameras, &ds.main_model, &main.masks, (128, 128)).unwrap();
    c.bench_function("consensus_score_16_views", |b| {
        b.iter(|| reference.score(black_box(&Sim3::identity())).unwrap())
    });
}

fn selection(c: &mut Criterion) {
    let ds = two_pose_fixture(150);
    let (main, aux) = (&ds.poses[0], &ds.poses[1]);
    let params = SelectionParams::default();
    c.bench_function("select_mixed_set_150", |b| {
        b.iter(|| {
            select_mixed_set(
                &main.descriptors,
                &aux.descriptors,
                &main.cameras,
                &aux.cameras,
                &ds.oracle,
                &params,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = render, consensus, selection
}
criterion_main!(benches);
