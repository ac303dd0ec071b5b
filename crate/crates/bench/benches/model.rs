use std::hint::black_box;

use cameo_core::curation_match::{group_by_face, synthetic_corpus};
use cameo_core::dual_tower::{forward_towers, ForwardOptions};
use cameo_core::trainer::{sample_scene, train_step, AblationFlags, Experiment, ExperimentConfig, Stage, TrainState};
use criterion::{criterion_group, criterion_main, Criterion};

fn model(c: &mut Criterion) {
    let exp = Experiment::new(ExperimentConfig::default()).unwrap();
    let flags = AblationFlags::default();
    let data = exp.training_set(Stage::Stage2Joint, flags).unwrap();
    let scene = &data[0];
    let (vp, ap) = (scene.video.as_ref().unwrap(), scene.audio.as_ref().unwrap());
    let state = TrainState::fresh(&exp.model, Stage::Stage2Joint).unwrap();
    let opts = ForwardOptions::default();
    let (vi, ai) = (vp.input(vp.clean.clone()), ap.input(ap.clean.clone()));

    c.bench_function("forward_joint", |b| {
        b.iter(|| black_box(forward_towers(&exp.model, &state.params, Some(&vi), Some(&ai), 0.5, &opts).unwrap()))
    });

    let mut g = c.benchmark_group("slow");
    g.sample_size(10);
    let run = exp.stage_run(Stage::Stage2Joint, flags);
    g.bench_function("train_step_batch32", |b| {
        b.iter_batched(
            || state.clone(),
            |mut st| black_box(train_step(&exp.model, &mut st, &data, &run).unwrap()),
            criterion::BatchSize::LargeInput,
        )
    });
    let sampler = exp.sampler();
    g.bench_function("sample_50_steps", |b| {
        b.iter(|| black_box(sample_scene(&exp.model, &state.params, scene, &opts, &sampler, 0, 0).unwrap()))
    });
    g.finish();
}

fn curation(c: &mut Criterion) {
    let corpus = synthetic_corpus(50, 6, 16, 0.1, 0);
    c.bench_function("group_by_face_300", |b| {
        b.iter(|| black_box(group_by_face(&corpus, 0.6).unwrap()))
    });
}

criterion_group!(benches, model, curation);
criterion_main!(benches);
