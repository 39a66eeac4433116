use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lrbench_core::degrade::{bicubic_resize, degrade, PreprocessSpec};
use lrbench_core::metrics::compute_all;
use lrbench_core::vit::synth::synthetic_dataset;
use lrbench_core::vit::{forward, BaseParameters, LRTokenBank, TinyViTConfig};
use lrbench_core::weights::{evaluate_objective, optimize_weights};
use lrbench_core::{
    AccuracyRecord, Bounds, DatasetMeta, GammaMatrix, Image, ModelMeta, Objective, ResultsTable, RobustnessConfig,
    WeightVector,
};

const LOW: [u32; 4] = [16, 32, 64, 128];

fn pattern(i: usize, j: usize) -> f64 {
    ((i * 37 + j * 11) % 97) as f64 / 97.0
}

fn table(models: usize, datasets: usize) -> ResultsTable {
    let metas: Vec<DatasetMeta> = (0..datasets).map(|j| DatasetMeta::new(format!("d{j}"), 10 + j as u32).unwrap()).collect();
    let model_metas: Vec<ModelMeta> = (0..models).map(|m| ModelMeta::new(format!("m{m}"), "vit", 224).unwrap()).collect();
    let mut records = Vec::new();
    for m in 0..models {
        for j in 0..datasets {
            let hr = 0.4 + 0.5 * pattern(m, j);
            let mut push = |resolution: u32, top1: f64| {
                records.push(AccuracyRecord {
                    model_id: format!("m{m}"),
                    backbone_id: "vit".into(),
                    dataset_id: format!("d{j}"),
                    resolution,
                    top1,
                    top5: None,
                })
            };
            push(224, hr);
            for (k, n) in LOW.iter().enumerate() {
                push(*n, hr * (0.2 + 0.2 * k as f64) * (0.5 + 0.5 * pattern(j, m + k)));
            }
        }
    }
    ResultsTable::from_records(records, metas, model_metas).unwrap()
}

fn bench_resize(c: &mut Criterion) {
    let img = Image::from_fn(224, 224, |y, x, ch| ((x * 3 + y * 5 + ch * 40) % 256) as f32 / 255.0);
    c.bench_function("bicubic 224->16", |b| b.iter(|| bicubic_resize(black_box(&img), 16, 16).unwrap()));
    c.bench_function("bicubic 16->224", |b| {
        let small = bicubic_resize(&img, 16, 16).unwrap();
        b.iter(|| bicubic_resize(black_box(&small), 224, 224).unwrap())
    });
    let spec = PreprocessSpec::new(32, 224);
    c.bench_function("degrade 32@224", |b| b.iter(|| degrade(black_box(&img), &spec).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let t = table(66, 15);
    let ids: Vec<String> = (0..15).map(|j| format!("d{j}")).collect();
    let bounds = Bounds::new(0.01, 1.0).unwrap();
    let weights = WeightVector::uniform(ids.iter(), bounds, 1.0).unwrap();
    let cfg = RobustnessConfig::default();
    c.bench_function("compute_all 66x15x4", |b| b.iter(|| compute_all(black_box(&t), &cfg, &weights).unwrap()));
}

fn bench_objective(c: &mut Criterion) {
    let (models, datasets) = (66, 15);
    let values = (0..models * datasets).map(|i| pattern(i / datasets, i % datasets)).collect();
    let ids: Vec<String> = (0..datasets).map(|j| format!("d{j}")).collect();
    let matrix = GammaMatrix::new((0..models).map(|m| format!("m{m}")).collect(), ids.clone(), values).unwrap();
    let objective = Objective::new(vec![("d14".into(), 1.0), ("d3".into(), 0.95)]).unwrap();
    let bounds = Bounds::new(0.01, 1.0).unwrap();
    let weights = WeightVector::uniform(ids.iter(), bounds, 1.0).unwrap();
    c.bench_function("objective 66x15", |b| b.iter(|| evaluate_objective(black_box(&matrix), &weights, &objective).unwrap()));
    c.bench_function("optimize budget 200", |b| b.iter(|| optimize_weights(&matrix, &objective, bounds, 200, 0).unwrap()));
}

fn bench_forward(c: &mut Criterion) {
    let cfg = TinyViTConfig::default();
    let params = BaseParameters::init(&cfg, 0).unwrap();
    let tokens = LRTokenBank::zeros(&cfg);
    let img = synthetic_dataset(1, cfg.input_res, 1).remove(0);
    c.bench_function("forward default", |b| b.iter(|| forward(&params, None, black_box(&img), 0).unwrap()));
    c.bench_function("forward with tokens", |b| b.iter(|| forward(&params, Some(&tokens), black_box(&img), 0).unwrap()));
}

criterion_group!(benches, bench_resize, bench_metrics, bench_objective, bench_forward);
criterion_main!(benches);
