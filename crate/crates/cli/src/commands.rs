use std::fs;
use std::path::{Path, PathBuf};

use lrbench_core::analysis::{emit_report, model_heatmap, SimilarityHeatmap};
use lrbench_core::degrade::{degrade as degrade_image, PreprocessSpec};
use lrbench_core::metrics::{compute_all, AggregateScores, RobustnessScores};
use lrbench_core::results::{load_datasets_meta, load_models_meta, Format};
use lrbench_core::vit::synth::synthetic_dataset;
use lrbench_core::vit::train::degrade_to;
use lrbench_core::vit::{
    load_checkpoint, save_checkpoint, train, BaseParameters, BucketSpec, LRTokenBank, TinyViTConfig, TinyVit,
    TrainOptions,
};
use lrbench_core::weights::{optimize_weights, Bounds, GammaMatrix, Objective, WeightVector};
use lrbench_core::zeroshot::{build_class_embeddings, classify, encode_images, EmbeddingMatrix, LookupEncoder, PromptTemplateSet};
use lrbench_core::{Error, Image, ResultsTable, Result, RobustnessConfig};
use serde_json::{json, Value};

use crate::{DegradeArgs, IngestArgs, LayerSimArgs, MetricsArgs, OptimizeArgs, RankArgs, ReportArgs, TableArgs, TrainArgs, ZeroshotArgs};

const RUN_CONFIG: &str = "run_config.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    text.push('\n');
    write_file(path, text)
}

fn write_run_config(dir: &Path, command: &str, config: Value) -> Result<()> {
    write_json(
        &dir.join(RUN_CONFIG),
        &json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        }),
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

struct ResolvedTable {
    table: ResultsTable,
    datasets: PathBuf,
    models: PathBuf,
    format: Format,
}

impl ResolvedTable {
    fn config(&self, args: &TableArgs) -> Value {
        json!({
            "results": args.results,
            "format": format!("{:?}", self.format).to_lowercase(),
            "datasets": self.datasets,
            "models": self.models,
        })
    }
}

fn load_table(args: &TableArgs) -> Result<ResolvedTable> {
    let beside = |name: &str| args.results.parent().unwrap_or(Path::new("")).join(name);
    let datasets = args.datasets.clone().unwrap_or_else(|| beside("datasets.json"));
    let models = args.models.clone().unwrap_or_else(|| beside("models.json"));
    let format = match &args.format {
        Some(f) => f.parse()?,
        None => Format::from_path(&args.results).ok_or_else(|| {
            Error::validation(format!("cannot infer format of {}; pass --format", args.results.display()))
        })?,
    };
    let table = ResultsTable::ingest(&args.results, format, load_datasets_meta(&datasets)?, load_models_meta(&models)?)?;
    Ok(ResolvedTable {
        table,
        datasets,
        models,
        format,
    })
}

fn load_weights(path: Option<&Path>, bounds: Bounds, table: &ResultsTable) -> Result<WeightVector> {
    match path {
        Some(p) => WeightVector::load(p, bounds),
        None => WeightVector::uniform(table.datasets().iter().map(|d| d.dataset_id.clone()), bounds, bounds.hi),
    }
}

fn scores(
    table: &ResultsTable,
    alpha: f64,
    weights: &WeightVector,
) -> Result<(RobustnessScores, AggregateScores)> {
    compute_all(table, &RobustnessConfig::with_alpha(alpha)?, weights)
}

fn report_exclusions(scores: &RobustnessScores) {
    for m in scores.flagged_models() {
        eprintln!("warning: model {m} has no HR accuracy and was excluded");
    }
}

fn load_images(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!("no PNG or PPM images in {}", dir.display())));
    }
    paths.iter().map(Image::load).collect()
}

fn images_for(config: &TinyViTConfig, dir: Option<&Path>, count: usize, seed: u64) -> Result<Vec<Image>> {
    let res = config.input_res;
    match dir {
        Some(d) => load_images(d)?
            .iter()
            .map(|img| lrbench_core::degrade::resize(img, res, res, false))
            .collect(),
        None => Ok(synthetic_dataset(count, res, seed)),
    }
}

pub fn ingest(args: &IngestArgs) -> Result<()> {
    let resolved = load_table(&args.table)?;
    let table = &resolved.table;
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("results.csv"), table.to_csv())?;
    let coverage = table.coverage();
    write_json(
        &args.out_dir.join("coverage.json"),
        &json!({
            "present": coverage.present,
            "models": coverage.models,
            "datasets": coverage.datasets,
            "resolutions": coverage.resolutions,
            "missing": coverage.missing,
        }),
    )?;
    write_run_config(&args.out_dir, "ingest", json!({ "table": resolved.config(&args.table) }))?;
    println!(
        "{} records, {} models, {} datasets, {} missing cells",
        coverage.present,
        coverage.models,
        coverage.datasets,
        coverage.missing.len()
    );
    Ok(())
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let resolved = load_table(&args.table)?;
    let bounds: Bounds = args.bounds.parse()?;
    let weights = load_weights(args.weights.as_deref(), bounds, &resolved.table)?;
    let (cells, aggregates) = scores(&resolved.table, args.alpha, &weights)?;
    report_exclusions(&cells);
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("scores.csv"), aggregates.to_csv())?;
    write_file(&args.out_dir.join("cells.csv"), cells.to_csv())?;
    write_run_config(
        &args.out_dir,
        "metrics",
        json!({
            "table": resolved.config(&args.table),
            "alpha": args.alpha,
            "bounds": [bounds.lo, bounds.hi],
            "weights": weights.weights(),
        }),
    )?;
    println!("{} cells, {} aggregate rows", cells.cells.len(), aggregates.rows.len());
    Ok(())
}

pub fn optimize(args: &OptimizeArgs) -> Result<()> {
    let resolved = load_table(&args.table)?;
    let bounds: Bounds = args.bounds.parse()?;
    let objective: Objective = args.objective.parse()?;
    let uniform = load_weights(None, bounds, &resolved.table)?;
    let (cells, _) = scores(&resolved.table, args.alpha, &uniform)?;
    let (matrix, dropped) = GammaMatrix::from_scores(&cells, args.resolution)?;
    for m in &dropped {
        eprintln!("warning: model {m} lacks some datasets at n={} and was left out", args.resolution);
    }
    let found = optimize_weights(&matrix, &objective, bounds, args.budget, args.seed)?;
    create_dir(&args.out_dir)?;
    let mut weights_json = found.weights.to_json();
    weights_json.push('\n');
    write_file(&args.out_dir.join("weights.json"), weights_json)?;
    let mut trace = String::from("iteration,objective,best\n");
    for t in &found.trace {
        trace.push_str(&format!("{},{},{}\n", t.iteration, t.objective, t.best));
    }
    write_file(&args.out_dir.join("trace.csv"), trace)?;
    write_run_config(
        &args.out_dir,
        "optimize-weights",
        json!({
            "table": resolved.config(&args.table),
            "alpha": args.alpha,
            "resolution": args.resolution,
            "objective": objective.terms,
            "bounds": [bounds.lo, bounds.hi],
            "budget": args.budget,
            "seed": args.seed,
            "models": matrix.rows(),
            "dropped_models": dropped,
        }),
    )?;
    println!("objective {:.6} after {} evaluations", found.objective, found.trace.len());
    Ok(())
}

pub fn rank(args: &RankArgs) -> Result<()> {
    let resolved = load_table(&args.table)?;
    let bounds: Bounds = args.bounds.parse()?;
    let weights = load_weights(args.weights.as_deref(), bounds, &resolved.table)?;
    let (cells, aggregates) = scores(&resolved.table, args.alpha, &weights)?;
    report_exclusions(&cells);
    let pick = |r: &lrbench_core::metrics::ModelAggregate| -> Result<Option<f64>> {
        match args.by.as_str() {
            "war" => Ok(r.war),
            "sar" => Ok(Some(r.sar)),
            "acc" => Ok(Some(r.acc)),
            other => Err(Error::validation(format!("--by must be war, sar or acc, got '{other}'"))),
        }
    };
    let mut rows = Vec::new();
    for r in aggregates.rows.iter().filter(|r| r.resolution == args.resolution) {
        match pick(r)? {
            Some(v) => rows.push((r.model_id.clone(), v)),
            None => eprintln!("warning: model {} has no {} at n={}", r.model_id, args.by, args.resolution),
        }
    }
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut csv = format!("rank,model_id,{}\n", args.by);
    for (i, (m, v)) in rows.iter().enumerate() {
        csv.push_str(&format!("{},{m},{v}\n", i + 1));
    }
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("ranking.csv"), &csv)?;
    write_run_config(
        &args.out_dir,
        "rank",
        json!({
            "table": resolved.config(&args.table),
            "alpha": args.alpha,
            "bounds": [bounds.lo, bounds.hi],
            "weights": weights.weights(),
            "resolution": args.resolution,
            "by": args.by,
        }),
    )?;
    print!("{csv}");
    Ok(())
}

pub fn degrade(args: &DegradeArgs) -> Result<()> {
    let spec = PreprocessSpec {
        crop: args.crop,
        antialias: args.antialias,
        ..PreprocessSpec::unnormalized(args.n, args.model_res)
    };
    let img = Image::load(&args.input)?;
    let out = degrade_image(&img, &spec)?;
    let dir = args.output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    create_dir(dir)?;
    out.save(&args.output)?;
    write_run_config(
        dir,
        "degrade",
        json!({
            "input": args.input,
            "output": args.output,
            "n": args.n,
            "model_res": args.model_res,
            "crop": spec.crop_size(),
            "antialias": args.antialias,
        }),
    )?;
    println!("{}x{} -> {n}x{n} -> {c}x{c}", img.width(), img.height(), n = args.n, c = spec.crop_size());
    Ok(())
}

pub fn eval_zeroshot(args: &ZeroshotArgs) -> Result<()> {
    let images = match (&args.images_emb, &args.checkpoint, &args.image_dir) {
        (Some(p), _, _) => EmbeddingMatrix::load(p)?.0,
        (None, Some(ckpt), Some(dir)) => {
            let c = load_checkpoint(ckpt)?;
            let mut imgs = load_images(dir)?;
            if let Some(n) = args.n {
                imgs = imgs.iter().map(|img| degrade_to(img, n)).collect::<Result<_>>()?;
            }
            let model = TinyVit {
                params: c.params,
                tokens: c.tokens,
                start_block: c.manifest.start_block,
            };
            encode_images(&model, &imgs)?
        }
        _ => return Err(Error::validation("pass --images-emb, or --checkpoint with --image-dir")),
    };
    let classes = match (&args.classes_emb, &args.templates, &args.text_emb, &args.class_names) {
        (Some(p), _, _, _) => EmbeddingMatrix::load(p)?.0,
        (None, Some(t), Some(e), Some(names)) => {
            let names: Vec<String> = read_json(names)?;
            build_class_embeddings(&LookupEncoder::load(e)?, &names, &PromptTemplateSet::load(t)?)?
        }
        _ => return Err(Error::validation("pass --classes-emb, or --templates with --text-emb and --class-names")),
    };
    let labels: Vec<usize> = read_json(&args.labels)?;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes.rows()) {
        return Err(Error::validation(format!("label {bad} out of range for {} classes", classes.rows())));
    }
    let result = classify(&images, &classes, args.k)?;
    let k = result.topk.first().map_or(args.k, Vec::len);
    let top1 = result.accuracy(&labels, 1)?;
    let topk = result.accuracy(&labels, k)?;
    let mut csv = String::from("image,label");
    for r in 1..=k {
        csv.push_str(&format!(",top{r}"));
    }
    csv.push_str(",tie\n");
    for (i, (t, tie)) in result.topk.iter().zip(&result.ties).enumerate() {
        csv.push_str(&format!("{i},{}", labels[i]));
        for p in t {
            csv.push_str(&format!(",{p}"));
        }
        csv.push_str(&format!(",{tie}\n"));
    }
    create_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("predictions.csv"), csv)?;
    let ties = result.ties.iter().filter(|&&t| t).count();
    write_json(
        &args.out_dir.join("accuracy.json"),
        &json!({ "images": labels.len(), "top1": top1, "k": k, "topk": topk, "ties": ties }),
    )?;
    write_run_config(
        &args.out_dir,
        "eval-zeroshot",
        json!({
            "images_emb": args.images_emb,
            "checkpoint": args.checkpoint,
            "image_dir": args.image_dir,
            "n": args.n,
            "classes_emb": args.classes_emb,
            "templates": args.templates,
            "text_emb": args.text_emb,
            "class_names": args.class_names,
            "labels": args.labels,
            "k": k,
        }),
    )?;
    println!("top-1 {top1:.4}, top-{k} {topk:.4} over {} images ({ties} ties)", labels.len());
    Ok(())
}

/// Seed offsets so that one `--seed` drives independent streams.
const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

pub fn train_lrtk(args: &TrainArgs) -> Result<()> {
    let (params, base_source) = match (&args.config, &args.base) {
        (_, Some(dir)) => (load_checkpoint(dir)?.params, json!({ "checkpoint": dir })),
        (Some(path), None) => {
            let cfg: TinyViTConfig = read_json(path)?;
            (BaseParameters::init(&cfg, args.seed)?, json!({ "config": path, "init_seed": args.seed }))
        }
        (None, None) => (
            BaseParameters::init(&TinyViTConfig::default(), args.seed)?,
            json!({ "config": null, "init_seed": args.seed }),
        ),
    };
    let cfg = params.config.clone();
    if args.start_block > cfg.depth {
        return Err(Error::validation(format!(
            "--start-block {} exceeds depth {}",
            args.start_block, cfg.depth
        )));
    }
    let buckets: BucketSpec = args.buckets.parse()?;
    let images = images_for(&cfg, args.image_dir.as_deref(), args.images, args.seed.wrapping_add(DATA_STREAM))?;
    let opts = TrainOptions {
        temperature: args.temperature,
        learning_rate: args.lr,
        start_block: args.start_block,
    };
    let mut tokens = LRTokenBank::zeros(&cfg);
    let report_every = (args.steps / 10).max(1);
    let losses = train(
        &params,
        &mut tokens,
        &images,
        &buckets,
        &opts,
        args.steps,
        args.seed.wrapping_add(TRAIN_STREAM),
        |step, loss| {
            if step % report_every == 0 || step + 1 == args.steps {
                eprintln!("step {step:>5}  loss {loss:.5}");
            }
        },
    )?;
    create_dir(&args.out_dir)?;
    save_checkpoint(&args.out_dir, &params, Some(&tokens), args.seed, args.start_block)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_file(&args.out_dir.join("losses.csv"), csv)?;
    write_run_config(
        &args.out_dir,
        "train-lrtk",
        json!({
            "base": base_source,
            "model": cfg,
            "steps": args.steps,
            "seed": args.seed,
            "data_seed": args.seed.wrapping_add(DATA_STREAM),
            "train_seed": args.seed.wrapping_add(TRAIN_STREAM),
            "buckets": buckets.to_string(),
            "start_block": args.start_block,
            "learning_rate": args.lr,
            "temperature": args.temperature,
            "image_dir": args.image_dir,
            "images": images.len(),
        }),
    )?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("loss {first:.5} -> {last:.5} over {} steps", losses.len());
    }
    Ok(())
}

pub fn layer_sim(args: &LayerSimArgs) -> Result<()> {
    let c = load_checkpoint(&args.checkpoint)?;
    let cfg = &c.params.config;
    let images = images_for(cfg, args.image_dir.as_deref(), args.images, args.seed.wrapping_add(DATA_STREAM))?;
    let tokens = if args.no_tokens { None } else { c.tokens.as_ref() };
    create_dir(&args.out_dir)?;
    for &n in &args.n {
        let map = model_heatmap(&c.params, tokens, &images, n, c.manifest.start_block)?;
        write_file(&args.out_dir.join(format!("heatmap_{n}.csv")), map.to_csv())?;
        let (shallow, deep) = map.shallow_deep_means();
        println!("n={n}: shallow-half diagonal {shallow:.4}, deep-half diagonal {deep:.4}");
    }
    write_run_config(
        &args.out_dir,
        "layer-sim",
        json!({
            "checkpoint": args.checkpoint,
            "n": args.n,
            "tokens": tokens.is_some(),
            "start_block": c.manifest.start_block,
            "image_dir": args.image_dir,
            "images": images.len(),
            "data_seed": args.seed.wrapping_add(DATA_STREAM),
        }),
    )?;
    Ok(())
}

fn heatmap_resolution(path: &Path) -> Result<usize> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("heatmap_"))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::validation(format!("{}: expected a heatmap_<n>.csv file name", path.display())))
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let resolved = load_table(&args.table)?;
    let bounds: Bounds = args.bounds.parse()?;
    let weights = load_weights(args.weights.as_deref(), bounds, &resolved.table)?;
    let (cells, aggregates) = scores(&resolved.table, args.alpha, &weights)?;
    report_exclusions(&cells);
    let heatmaps = args
        .heatmap
        .iter()
        .map(|p| {
            let n = heatmap_resolution(p)?;
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok((n, SimilarityHeatmap::from_csv(&text)?))
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&args.out_dir)?;
    let files = emit_report(&args.out_dir, &aggregates, &cells, &heatmaps)?;
    write_run_config(
        &args.out_dir,
        "report",
        json!({
            "table": resolved.config(&args.table),
            "alpha": args.alpha,
            "bounds": [bounds.lo, bounds.hi],
            "weights": weights.weights(),
            "heatmaps": args.heatmap,
        }),
    )?;
    println!("wrote {} charts and {} heatmaps to {}", files.charts.len(), files.heatmaps.len(), args.out_dir.display());
    Ok(())
}
