mod common;

use common::*;
use lrbench_core::analysis::{
    emit_report, export_features, layer_similarity, parse_chart_data, similarity,
};
use lrbench_core::metrics::{compute_all, improved_robustness};
use lrbench_core::results::{DatasetMeta, ModelMeta};
use lrbench_core::vit::synth::synthetic_dataset;
use lrbench_core::vit::{
    forward, sample_multiscale, train, vpt_forward, vpt_zeros, BaseParameters, BucketSpec, LRTokenBank,
    TinyViTConfig, TinyVit, TrainOptions, VPT_TOKENS,
};
use lrbench_core::zeroshot::EmbeddingMatrix;
use lrbench_core::{AccuracyRecord, AggregateScores, ResultsTable, RobustnessConfig, RobustnessScores, WeightVector};
use proptest::prelude::*;

fn small() -> TinyViTConfig {
    TinyViTConfig {
        input_res: 32,
        dim: 16,
        heads: 2,
        depth: 2,
        embed_dim_out: 16,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_tokens_equal_absent_tokens(seed in 0u64..1000, start in 0usize..=2) {
        let cfg = small();
        let params = BaseParameters::init(&cfg, seed).unwrap();
        let img = random_image(32, 32, &mut seeded(seed));
        let zero = LRTokenBank::zeros(&cfg);
        let a = forward(&params, None, &img, start).unwrap();
        let b = forward(&params, Some(&zero), &img, start).unwrap();
        prop_assert_eq!(a.embedding, b.embedding);
        prop_assert_eq!(a.layer_features, b.layer_features);
    }

    #[test]
    fn similarity_decreases_with_distance(d1 in 0.0f64..4.0, extra in 1e-6f64..4.0) {
        let a = [0.0, 0.0];
        prop_assert!(similarity(&a, &[d1, 0.0]) > similarity(&a, &[d1 + extra, 0.0]));
    }

    #[test]
    fn improved_robustness_never_exceeds_gamma(g in 0.0f64..2.0, e in 0.0f64..1.0) {
        let v = improved_robustness(g, e, 200.0);
        prop_assert!(v <= g && v >= 0.0);
    }
}

#[test]
fn resolution_sampling_is_uniform() {
    let img = lrbench_core::Image::constant(16, 16, 0.5);
    let buckets: BucketSpec = "16:32".parse().unwrap();
    let mut rng = seeded(21);
    let mut counts = [0usize; 17];
    let draws = 10_000;
    for _ in 0..draws {
        let (n, _) = sample_multiscale(&img, &buckets, &mut rng).unwrap().remove(0);
        assert!((16..=32).contains(&n));
        counts[n - 16] += 1;
    }
    let p = 1.0 / 17.0;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (k, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expected).abs() <= 5.0 * sigma, "n={} count {c}", k + 16);
    }
}

#[test]
fn prompt_tokens_extend_the_sequence_and_change_the_output() {
    let cfg = TinyViTConfig::default();
    let params = BaseParameters::init(&cfg, 1).unwrap();
    let img = random_image(64, 64, &mut seeded(2));
    let base = forward(&params, None, &img, 0).unwrap();
    let prompted = vpt_forward(&params, &vpt_zeros(&cfg), &img).unwrap();
    assert_eq!(prompted.sequence_len(), cfg.num_patches() + 1 + VPT_TOKENS);
    assert_ne!(base.embedding, prompted.embedding);
}

#[test]
fn hundred_steps_reduce_the_loss() {
    let cfg = TinyViTConfig::default();
    let params = BaseParameters::init(&cfg, 0).unwrap();
    let images = synthetic_dataset(8, 64, 1);
    let mut tokens = LRTokenBank::zeros(&cfg);
    let losses = train(
        &params,
        &mut tokens,
        &images,
        &BucketSpec::default(),
        &TrainOptions::default(),
        100,
        3,
        |_, _| {},
    )
    .unwrap();
    assert!(losses[99] < losses[0], "{} vs {}", losses[99], losses[0]);
}

#[test]
fn exported_features_round_trip() {
    let cfg = TinyViTConfig::default();
    let model = TinyVit {
        params: BaseParameters::init(&cfg, 5).unwrap(),
        tokens: None,
        start_block: 0,
    };
    let images = synthetic_dataset(10, 64, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.f32");
    let written = export_features(&model, &images, &path).unwrap();
    assert_eq!((written.rows(), written.dim()), (10, 32));
    let (back, side) = EmbeddingMatrix::load(&path).unwrap();
    assert_eq!(side.rows, 10);
    assert_eq!(back.values(), written.values());
}

#[test]
fn layer_similarity_of_identical_stacks() {
    let f: Vec<Vec<f64>> = (0..5).map(|i| vec![(i as f64).cos(), (i as f64).sin()]).collect();
    let h = layer_similarity(&f, &f).unwrap();
    for i in 0..5 {
        assert_eq!(h.get(i, i), 1.0);
        for j in 0..5 {
            assert!(h.get(i, j) > 0.0 && h.get(i, j) <= 1.0);
        }
    }
}

#[test]
fn empty_report_has_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(dir.path(), &AggregateScores::default(), &RobustnessScores::default(), &[]).unwrap();
    assert_eq!(std::fs::read_to_string(files.scores).unwrap(), "model_id,resolution,sar,war,acc\n");
    assert_eq!(
        std::fs::read_to_string(files.cells).unwrap(),
        "model_id,dataset_id,resolution,gamma,gamma_improved,gap,flags\n"
    );
    for chart in files.charts {
        let data = parse_chart_data(&std::fs::read_to_string(chart).unwrap()).unwrap();
        assert!(data.series.is_empty());
    }
}

#[test]
fn chart_data_equals_csv_values() {
    let datasets = vec![DatasetMeta::new("A", 10).unwrap(), DatasetMeta::new("B", 100).unwrap()];
    let models = vec![ModelMeta::new("m1", "vit", 224).unwrap(), ModelMeta::new("m2", "vit", 224).unwrap()];
    let mut records = Vec::new();
    for (m, base) in [("m1", 0.8), ("m2", 0.6)] {
        for (d, scale) in [("A", 1.0), ("B", 0.7)] {
            for (k, n) in [16u32, 32, 64, 128, 224].iter().enumerate() {
                records.push(AccuracyRecord {
                    model_id: m.into(),
                    backbone_id: "vit".into(),
                    dataset_id: d.into(),
                    resolution: *n,
                    top1: base * scale * (0.5 + 0.1 * k as f64),
                    top5: None,
                });
            }
        }
    }
    let table = ResultsTable::from_records(records, datasets, models).unwrap();
    let weights = WeightVector::uniform(["A", "B"], Default::default(), 1.0).unwrap();
    let (scores, aggregates) = compute_all(&table, &RobustnessConfig::default(), &weights).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_report(dir.path(), &aggregates, &scores, &[]).unwrap();
    let chart = parse_chart_data(&std::fs::read_to_string(&files.charts[0]).unwrap()).unwrap();
    let csv = std::fs::read_to_string(&files.scores).unwrap();
    let mut from_csv: Vec<(String, f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    let mut from_chart: Vec<(String, f64, f64)> = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (s.name.clone(), x, y)))
        .collect();
    from_csv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    from_chart.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(from_csv.len(), 8);
    assert_eq!(from_chart, from_csv);
}
