mod common;

use common::*;
use lrbench_core::vit::train::distill_loss;
use lrbench_core::vit::{
    forward, token_gradients, train_step, vpt_loss_grad, vpt_zeros, BaseParameters, BucketSpec, LRTokenBank,
    TinyViTConfig, TrainBatch, TrainOptions, DEFAULT_TEMPERATURE,
};
use ndarray::Array2;
use rand::Rng;

fn reduced() -> TinyViTConfig {
    TinyViTConfig {
        input_res: 32,
        patch_size: 8,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        embed_dim_out: 8,
    }
}

fn batch(cfg: &TinyViTConfig, seed: u64) -> TrainBatch {
    let mut rng = seeded(seed);
    let images: Vec<_> = (0..3).map(|_| random_image(cfg.input_res, cfg.input_res, &mut rng)).collect();
    let buckets: BucketSpec = "8:16,16:24".parse().unwrap();
    TrainBatch::sample(&images, &buckets, &mut rng).unwrap()
}

fn random_bank(cfg: &TinyViTConfig, rng: &mut impl Rng) -> LRTokenBank {
    let banks = (0..cfg.num_banks())
        .map(|_| Array2::from_shape_simple_fn((cfg.num_patches(), cfg.dim), || 0.3 * (rng.random::<f64>() - 0.5)))
        .collect();
    LRTokenBank::from_banks(cfg, banks).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)` in the Frobenius norm.
fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    norm(&(analytic - numeric)) / norm(analytic).max(norm(numeric))
}

fn token_fd_errors(params: &BaseParameters, tokens: &LRTokenBank, batch: &TrainBatch, opts: &TrainOptions, eps: f64) -> Vec<f64> {
    let cfg = &params.config;
    let (_, grads) = token_gradients(params, tokens, batch, opts).unwrap();
    let mut errs = Vec::new();
    for (b, g) in grads.iter().enumerate() {
        if !LRTokenBank::is_active(b, opts.start_block) {
            assert!(g.is_none(), "inactive bank {b} has a gradient");
            continue;
        }
        let g = g.as_ref().unwrap();
        let mut numeric = Array2::zeros(g.raw_dim());
        for idx in 0..g.len() {
            let (i, j) = (idx / cfg.dim, idx % cfg.dim);
            let mut plus = tokens.clone();
            plus.bank_mut(b)[[i, j]] += eps;
            let mut minus = tokens.clone();
            minus.bank_mut(b)[[i, j]] -= eps;
            numeric[[i, j]] = (distill_loss(params, &plus, batch, opts).unwrap()
                - distill_loss(params, &minus, batch, opts).unwrap())
                / (2.0 * eps);
        }
        errs.push(rel_err(g, &numeric));
    }
    errs
}

#[test]
fn token_gradients_match_central_differences() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 1).unwrap();
    let batch = batch(&cfg, 2);
    for start in [0, 2] {
        let opts = TrainOptions {
            start_block: start,
            ..Default::default()
        };
        let mut tokens = LRTokenBank::zeros(&cfg);
        let errs = token_fd_errors(&params, &tokens, &batch, &opts, 1e-3);
        assert!(errs.iter().all(|&e| e < 1e-3), "start {start}, zero tokens: {errs:?}");
        for step in 0..5 {
            train_step(&params, &mut tokens, &batch, &opts, step).unwrap();
        }
        let errs = token_fd_errors(&params, &tokens, &batch, &opts, 1e-3);
        assert!(errs.iter().all(|&e| e < 1e-3), "start {start}, trained tokens: {errs:?}");
    }
}

#[test]
fn token_gradients_converge_at_random_points() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 1).unwrap();
    let batch = batch(&cfg, 2);
    let tokens = random_bank(&cfg, &mut seeded(3));
    for start in [0, 2] {
        let opts = TrainOptions {
            start_block: start,
            temperature: 0.5,
            ..Default::default()
        };
        let coarse = token_fd_errors(&params, &tokens, &batch, &opts, 1e-3);
        let fine = token_fd_errors(&params, &tokens, &batch, &opts, 1e-4);
        for (c, f) in coarse.iter().zip(&fine) {
            assert!(*f < 1e-3, "start {start}: {fine:?}");
            // second-order truncation: a tenfold step cut shrinks the error about a hundredfold
            assert!(*f < c / 50.0 || *f < 1e-7, "start {start}: {coarse:?} -> {fine:?}");
        }
    }
}

fn prompt_fd_error(params: &BaseParameters, prompts: &Array2<f64>, batch: &TrainBatch, eps: f64) -> f64 {
    let (_, g) = vpt_loss_grad(params, prompts, batch, DEFAULT_TEMPERATURE).unwrap();
    let loss = |p: &Array2<f64>| vpt_loss_grad(params, p, batch, DEFAULT_TEMPERATURE).unwrap().0;
    let mut numeric = Array2::zeros(g.raw_dim());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let mut plus = prompts.clone();
            plus[[i, j]] += eps;
            let mut minus = prompts.clone();
            minus[[i, j]] -= eps;
            numeric[[i, j]] = (loss(&plus) - loss(&minus)) / (2.0 * eps);
        }
    }
    rel_err(&g, &numeric)
}

#[test]
fn prompt_gradients_match_central_differences() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 4).unwrap();
    let batch = batch(&cfg, 5);
    let mut rng = seeded(6);
    let prompts = vpt_zeros(&cfg).mapv(|_| 0.02 * (rng.random::<f64>() - 0.5));
    let coarse = prompt_fd_error(&params, &prompts, &batch, 1e-4);
    let fine = prompt_fd_error(&params, &prompts, &batch, 1e-5);
    assert!(fine < 1e-3, "relative error {fine}");
    assert!(fine < coarse / 50.0, "{coarse} -> {fine}");
}

#[test]
fn first_step_student_equals_teacher_at_hr() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 7).unwrap();
    let zero = LRTokenBank::zeros(&cfg);
    let img = random_image(32, 32, &mut seeded(8));
    let s = forward(&params, Some(&zero), &img, 0).unwrap();
    let t = forward(&params, None, &img, 0).unwrap();
    assert_eq!(s.embedding, t.embedding);
}

#[test]
fn train_step_moves_only_active_tokens() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 9).unwrap();
    let before = params.to_f32_bytes();
    let batch = batch(&cfg, 10);
    let mut tokens = LRTokenBank::zeros(&cfg);
    let opts = TrainOptions {
        start_block: 2,
        learning_rate: 0.5,
        ..Default::default()
    };
    train_step(&params, &mut tokens, &batch, &opts, 0).unwrap();
    assert!(tokens.bank(0).iter().all(|&v| v == 0.0));
    assert!(tokens.bank(1).iter().all(|&v| v == 0.0));
    assert!(tokens.bank(2).iter().any(|&v| v != 0.0));
    assert_eq!(params.to_f32_bytes(), before);
}

#[test]
fn singleton_batch_is_rejected() {
    let cfg = reduced();
    let params = BaseParameters::init(&cfg, 11).unwrap();
    let img = random_image(32, 32, &mut seeded(12));
    let b = TrainBatch::sample(&[img], &BucketSpec::default(), &mut seeded(13)).unwrap();
    let mut tokens = LRTokenBank::zeros(&cfg);
    assert!(train_step(&params, &mut tokens, &b, &TrainOptions::default(), 0).is_err());
}
