//! `lrbench`: every pipeline stage as a subcommand.
//!
//! Exit status: 0 success, 1 validation error, 2 I/O error, 64 usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "lrbench", version, about = "Low-resolution robustness benchmark toolkit")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "LRBENCH_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an accuracy table and write it back in canonical form.
    Ingest(IngestArgs),
    /// Compute γ, Γ, SAR, WAR and ACC.
    Metrics(MetricsArgs),
    /// Search WAR dataset weights that maximize the rank-agreement objective.
    OptimizeWeights(OptimizeArgs),
    /// Rank models by WAR, SAR or ACC at one resolution.
    Rank(RankArgs),
    /// Simulate a low-resolution capture of one image.
    Degrade(DegradeArgs),
    /// Zero-shot classification from image and class embeddings.
    EvalZeroshot(ZeroshotArgs),
    /// Train LR token banks on a frozen tiny transformer.
    TrainLrtk(TrainArgs),
    /// Layer-wise LR/HR similarity heatmaps of a checkpoint.
    LayerSim(LayerSimArgs),
    /// Write the CSV and SVG report bundle.
    Report(ReportArgs),
}

/// Accuracy table plus the metadata it is validated against.
#[derive(Debug, Args)]
pub struct TableArgs {
    /// Accuracy file (.csv or .json).
    #[arg(long)]
    pub results: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<String>,
    /// Dataset metadata (default: datasets.json beside the results file).
    #[arg(long)]
    pub datasets: Option<PathBuf>,
    /// Model metadata (default: models.json beside the results file).
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub table: TableArgs,
    /// Sharpness of the near-chance damping.
    #[arg(long, default_value_t = 200.0)]
    pub alpha: f64,
    /// WAR weights as `{dataset_id: weight}`; uniform when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Weight bounds `lo:hi`.
    #[arg(long, default_value = "0.01:1")]
    pub bounds: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, default_value_t = 200.0)]
    pub alpha: f64,
    /// Resolution whose Γ matrix drives the search.
    #[arg(long, default_value_t = 16)]
    pub resolution: u32,
    /// `dataset:coefficient` pairs, comma separated.
    #[arg(long, default_value = "ImageNet:0.95,ImageNet-V2:0.95,DTD:0.95,ImageNet-A:1,EuroSAT:1")]
    pub objective: String,
    #[arg(long, default_value = "0.01:1")]
    pub bounds: String,
    /// Objective evaluations.
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, default_value_t = 200.0)]
    pub alpha: f64,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "0.01:1")]
    pub bounds: String,
    #[arg(long, default_value_t = 16)]
    pub resolution: u32,
    /// Score to rank by: war, sar or acc.
    #[arg(long, default_value = "war")]
    pub by: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Low-resolution side.
    #[arg(long)]
    pub n: usize,
    /// Side the image is resized back up to.
    #[arg(long, default_value_t = 224)]
    pub model_res: usize,
    /// Center-crop side after upsampling (default: model resolution).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Widen the kernel when downsampling.
    #[arg(long)]
    pub antialias: bool,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    /// Precomputed image embeddings.
    #[arg(long, conflicts_with_all = ["checkpoint", "image_dir"])]
    pub images_emb: Option<PathBuf>,
    /// Encode images with this tiny-transformer checkpoint instead.
    #[arg(long, requires = "image_dir")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Degrade images to this side before encoding.
    #[arg(long)]
    pub n: Option<usize>,
    /// Precomputed class embeddings.
    #[arg(long, conflicts_with_all = ["templates", "text_emb", "class_names"])]
    pub classes_emb: Option<PathBuf>,
    /// Prompt templates, combined with `--text-emb` and `--class-names`.
    #[arg(long, requires_all = ["text_emb", "class_names"])]
    pub templates: Option<PathBuf>,
    /// Text embeddings keyed by prompt.
    #[arg(long)]
    pub text_emb: Option<PathBuf>,
    /// JSON array of class names.
    #[arg(long)]
    pub class_names: Option<PathBuf>,
    /// JSON array of ground-truth class indices.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Transformer configuration JSON (default: the built-in toy config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the base parameters of an existing checkpoint.
    #[arg(long, conflicts_with = "config")]
    pub base: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "16:32,32:64,64:128")]
    pub buckets: String,
    #[arg(long, default_value_t = 0)]
    pub start_block: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    /// Training images (PNG/PPM); synthetic images when omitted.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Number of synthetic images.
    #[arg(long, default_value_t = 32)]
    pub images: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LayerSimArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Low resolutions, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub n: Vec<usize>,
    /// Compare the frozen model without its token banks.
    #[arg(long)]
    pub no_tokens: bool,
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub images: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, default_value_t = 200.0)]
    pub alpha: f64,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value = "0.01:1")]
    pub bounds: String,
    /// `heatmap_<n>.csv` files to include.
    #[arg(long)]
    pub heatmap: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::Metrics(a) => commands::metrics(&a),
        Command::OptimizeWeights(a) => commands::optimize(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::Degrade(a) => commands::degrade(&a),
        Command::EvalZeroshot(a) => commands::eval_zeroshot(&a),
        Command::TrainLrtk(a) => commands::train_lrtk(&a),
        Command::LayerSim(a) => commands::layer_sim(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { EXIT_IO } else { EXIT_VALIDATION })
        }
    }
}
