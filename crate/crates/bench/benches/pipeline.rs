use crat_core::experiment::euclidean_select;
use crat_core::metrics::{evaluate_predictions, ground_truths};
use crat_core::model::{ModelConfig, ModelParams, Predictor};
use crat_core::scene::{generate_synthetic, PreparedScene, ScenarioKind, SyntheticConfig};
use crat_core::training::stage1_batch_loss;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

const BATCH: usize = 32;

fn scenes(kind: ScenarioKind, n: usize) -> Vec<PreparedScene> {
    generate_synthetic(&SyntheticConfig::new(kind, n, 7))
        .iter()
        .map(|s| PreparedScene::from_scene(&s.scene))
        .collect()
}

fn model(use_attention: bool) -> ModelParams {
    ModelParams::init(
        ModelConfig {
            use_attention,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap()
}

fn bench_prepare(c: &mut Criterion) {
    let raw = generate_synthetic(&SyntheticConfig::new(ScenarioKind::Intersection, BATCH, 7));
    c.bench_function("prepare 32 scenes", |b| {
        b.iter(|| {
            raw.iter()
                .map(|s| PreparedScene::from_scene(black_box(&s.scene)))
                .collect::<Vec<_>>()
        })
    });
}

fn bench_predict(c: &mut Criterion) {
    let batch = scenes(ScenarioKind::ConstantVelocity, BATCH);
    let mut group = c.benchmark_group("predict batch of 32, k = 6");
    group.sample_size(10);
    for (name, m) in [("full", model(true)), ("attention-free", model(false))] {
        group.bench_function(name, |b| b.iter(|| m.predict(black_box(&batch)).unwrap()));
    }
    group.finish();
}

fn bench_training_step(c: &mut Criterion) {
    let batch = scenes(ScenarioKind::ConstantVelocity, BATCH);
    let refs: Vec<&PreparedScene> = batch.iter().collect();
    let m = model(true);
    let mut group = c.benchmark_group("stage 1 loss and gradients, batch of 32");
    group.sample_size(10);
    group.bench_function("full", |b| {
        b.iter(|| stage1_batch_loss(&m, &m.params, black_box(&refs), 1.0, true).unwrap())
    });
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let val = scenes(ScenarioKind::BimodalTurn, 200);
    let gts = ground_truths(&val).unwrap();
    let preds = model(true).predict(&val).unwrap();
    c.bench_function("metrics over 200 scenes, k = 6", |b| {
        b.iter(|| evaluate_predictions(black_box(&preds), black_box(&gts), 6).unwrap())
    });
}

fn bench_selection(c: &mut Criterion) {
    let raw = generate_synthetic(&SyntheticConfig::new(
        ScenarioKind::LeaderFollower,
        BATCH,
        7,
    ));
    c.bench_function("euclidean selection, L_s = 3", |b| {
        b.iter(|| {
            raw.iter()
                .map(|s| euclidean_select(black_box(&s.scene), 3))
                .collect::<Vec<_>>()
        })
    });
}

criterion_group!(
    benches,
    bench_prepare,
    bench_predict,
    bench_training_step,
    bench_metrics,
    bench_selection
);
criterion_main!(benches);
