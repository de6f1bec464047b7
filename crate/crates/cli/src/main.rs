//! Command-line entry point: vectorize, synth, train, inbetween, eval.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use linetween::eval::{default_search_diameter, evaluate};
use linetween::geom::{load_graph, rasterize, save_graph, RasterImage};
use linetween::learn::{train_with_progress, write_loss_csv, TrainConfig};
use linetween::model::{ModelConfig, ModelParams};
use linetween::pipeline::{inbetween, PipelineOptions};
use linetween::synth::{
    build_split_samples, dataset_stats, generate_dataset, DatasetManifest, Split, SynthConfig,
};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "linetween", version, about = "Geometrized line-drawing inbetweening toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raster line drawing into a graph JSON file.
    Vectorize(VectorizeArgs),
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Produce the intermediate frame between two key frames.
    Inbetween(InbetweenArgs),
    /// Evaluate a model with the chamfer-distance metric.
    Eval(EvalArgs),
}

#[derive(Args)]
struct VectorizeArgs {
    /// Input image (PNG or PGM).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output graph JSON path.
    #[arg(long = "out")]
    output: PathBuf,
    /// Polyline simplification tolerance in pixels.
    #[arg(long, default_value_t = 1.5)]
    tol: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    figures: usize,
    #[arg(long, default_value_t = 6)]
    motions: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 128)]
    canvas: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Figure complexity level (1 = a single stroke).
    #[arg(long, default_value_t = 3)]
    complexity: u32,
    /// Motion amplitude scale (0 = static).
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Output dataset directory.
    #[arg(long = "out")]
    out_dir: PathBuf,
    /// Also print per-gap difficulty statistics for these gaps.
    #[arg(long, value_delimiter = ',')]
    stats_gaps: Vec<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (contains manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// JSON config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output parameter container.
    #[arg(long = "out")]
    output: PathBuf,
    /// Loss log CSV path.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    epochs_phase1: Option<usize>,
    #[arg(long)]
    accumulation: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    gap_min: Option<usize>,
    #[arg(long)]
    gap_max: Option<usize>,
    /// Feature dimension C.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Attention layer count N.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    spectral_dim: Option<usize>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
}

#[derive(Args)]
struct InbetweenArgs {
    #[arg(long)]
    g0: PathBuf,
    #[arg(long)]
    g1: PathBuf,
    #[arg(long)]
    i0: PathBuf,
    #[arg(long)]
    i1: PathBuf,
    /// Intermediate time in (0, 1).
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    /// Parameter container produced by `train`.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out_graph: PathBuf,
    #[arg(long)]
    out_png: Option<PathBuf>,
    /// Line width for the rendered PNG.
    #[arg(long, default_value_t = 2)]
    line_width: u32,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (contains manifest.json).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Comma-separated odd frame gaps.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5, 9])]
    gaps: Vec<usize>,
    /// Search diameter, or "auto" for max(H, W)/10.
    #[arg(long, default_value = "auto")]
    d: String,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    /// Which split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report CSV path.
    #[arg(long = "out")]
    output: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<PartialModelConfig>,
    train: Option<PartialTrainConfig>,
    init_seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PartialModelConfig {
    feature_dim: Option<usize>,
    attention_layers: Option<usize>,
    spectral_dim: Option<usize>,
    match_threshold: Option<f64>,
    sinkhorn_iterations: Option<usize>,
    visibility_threshold: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PartialTrainConfig {
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    epochs_total: Option<usize>,
    epochs_phase1: Option<usize>,
    accumulation_steps: Option<usize>,
    bias_weight: Option<f64>,
    gap_min: Option<usize>,
    gap_max: Option<usize>,
    seed: Option<u64>,
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Vectorize(args) => cmd_vectorize(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Inbetween(args) => cmd_inbetween(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_vectorize(args: VectorizeArgs) -> Result<()> {
    if args.tol < 0.0 {
        bail!("tol must be non-negative, got {}", args.tol);
    }
    let image = RasterImage::load(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let graph = linetween::vectorize::geometrize(&image, args.tol);
    graph.validate().context("vectorized graph is invalid")?;
    save_graph(&graph, &args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    log::info!(
        "vectorized {} -> {} ({} vertices, {} edges)",
        args.input.display(),
        args.output.display(),
        graph.vertex_count(),
        graph.edges.len()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        figures: args.figures,
        motions: args.motions,
        frames: args.frames,
        canvas: args.canvas,
        seed: args.seed,
        complexity: args.complexity,
        amplitude: args.amplitude,
    };
    if config.figures == 0 || config.motions == 0 || config.frames == 0 {
        bail!("figures, motions, and frames must all be at least 1");
    }
    let manifest = generate_dataset(&config, &args.out_dir)
        .with_context(|| format!("generating dataset in {}", args.out_dir.display()))?;
    log::info!(
        "generated {} sequences x {} frames in {}",
        manifest.sequences.len(),
        config.frames,
        args.out_dir.display()
    );
    if !args.stats_gaps.is_empty() {
        let stats = dataset_stats(&manifest, &args.out_dir, &args.stats_gaps)?;
        println!("gap,pairs,occlusion_rate,avg_shift,avg_max_shift");
        for s in stats {
            println!(
                "{},{},{:.4},{:.3},{:.3}",
                s.gap, s.pairs, s.occlusion_rate, s.avg_shift, s.avg_max_shift
            );
        }
    }
    Ok(())
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_file_config(args.config.as_deref())?;
    let fm = file.model.unwrap_or_default();
    let ft = file.train.unwrap_or_default();
    let defaults_m = ModelConfig::default();
    let defaults_t = TrainConfig::default();
    let model_config = ModelConfig {
        feature_dim: args.feature_dim.or(fm.feature_dim).unwrap_or(defaults_m.feature_dim),
        attention_layers: args
            .layers
            .or(fm.attention_layers)
            .unwrap_or(defaults_m.attention_layers),
        spectral_dim: args
            .spectral_dim
            .or(fm.spectral_dim)
            .unwrap_or(defaults_m.spectral_dim),
        match_threshold: args
            .theta
            .or(fm.match_threshold)
            .unwrap_or(defaults_m.match_threshold),
        sinkhorn_iterations: args
            .sinkhorn_iters
            .or(fm.sinkhorn_iterations)
            .unwrap_or(defaults_m.sinkhorn_iterations),
        visibility_threshold: fm
            .visibility_threshold
            .unwrap_or(defaults_m.visibility_threshold),
    };
    let train_config = TrainConfig {
        learning_rate: args.lr.or(ft.learning_rate).unwrap_or(defaults_t.learning_rate),
        beta1: ft.beta1.unwrap_or(defaults_t.beta1),
        beta2: ft.beta2.unwrap_or(defaults_t.beta2),
        epsilon: ft.epsilon.unwrap_or(defaults_t.epsilon),
        epochs_total: args.epochs.or(ft.epochs_total).unwrap_or(defaults_t.epochs_total),
        epochs_phase1: args
            .epochs_phase1
            .or(ft.epochs_phase1)
            .unwrap_or(defaults_t.epochs_phase1),
        accumulation_steps: args
            .accumulation
            .or(ft.accumulation_steps)
            .unwrap_or(defaults_t.accumulation_steps),
        bias_weight: ft.bias_weight.unwrap_or(defaults_t.bias_weight),
        gap_min: args.gap_min.or(ft.gap_min).unwrap_or(defaults_t.gap_min),
        gap_max: args.gap_max.or(ft.gap_max).unwrap_or(defaults_t.gap_max),
        seed: args.seed.or(ft.seed).unwrap_or(defaults_t.seed),
    };
    train_config
        .validate()
        .map_err(|e| anyhow::anyhow!(e))
        .context("invalid train config")?;
    if model_config.feature_dim < 4 || model_config.feature_dim % 4 != 0 {
        bail!(
            "feature_dim must be a positive multiple of 4, got {}",
            model_config.feature_dim
        );
    }
    let init_seed = args.init_seed.or(file.init_seed).unwrap_or(1);

    let manifest = DatasetManifest::load(args.data.join("manifest.json"))
        .with_context(|| format!("loading manifest from {}", args.data.display()))?;
    log::info!(
        "building training samples (gaps {}..={}, odd only)",
        train_config.gap_min,
        train_config.gap_max
    );
    let samples = build_split_samples(
        &manifest,
        &args.data,
        Split::Train,
        train_config.gap_min,
        train_config.gap_max,
        model_config.spectral_dim,
    )?;
    if samples.is_empty() {
        bail!("no usable training pairs in {}", args.data.display());
    }
    log::info!(
        "training on {} pairs, {} epochs ({} phase-1), C={}, N={}",
        samples.len(),
        train_config.epochs_total,
        train_config.epochs_phase1,
        model_config.feature_dim,
        model_config.attention_layers
    );
    let params = ModelParams::init(model_config, init_seed);
    let (trained, log_rows) = train_with_progress(&samples, params, &train_config, |row| {
        if row.step % 10 == 0 {
            log::info!(
                "epoch {} step {}: L_c {:.4} L_r {:.4} L_m {:.4} total {:.4}",
                row.epoch,
                row.step,
                row.l_c,
                row.l_r,
                row.l_m,
                row.total
            );
        }
    });
    trained
        .save(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    if let Some(log_path) = &args.log {
        write_loss_csv(&log_rows, log_path)
            .with_context(|| format!("writing {}", log_path.display()))?;
    }
    log::info!("saved model to {}", args.output.display());
    Ok(())
}

fn cmd_inbetween(args: InbetweenArgs) -> Result<()> {
    let g0 = load_graph(&args.g0).with_context(|| format!("reading {}", args.g0.display()))?;
    let g1 = load_graph(&args.g1).with_context(|| format!("reading {}", args.g1.display()))?;
    let i0 = RasterImage::load(&args.i0)
        .with_context(|| format!("reading {}", args.i0.display()))?;
    let i1 = RasterImage::load(&args.i1)
        .with_context(|| format!("reading {}", args.i1.display()))?;
    let params = ModelParams::load(&args.params)
        .with_context(|| format!("reading {}", args.params.display()))?;
    let options = PipelineOptions {
        t: args.t,
        ..Default::default()
    };
    let out = inbetween(&g0, &g1, &i0, &i1, &params, &options)?;
    save_graph(&out.fused, &args.out_graph)
        .with_context(|| format!("writing {}", args.out_graph.display()))?;
    if let Some(png) = &args.out_png {
        if args.line_width == 0 {
            bail!("line width must be at least 1");
        }
        rasterize(&out.fused, args.line_width)
            .save(png)
            .with_context(|| format!("writing {}", png.display()))?;
    }
    log::info!(
        "inbetween frame: {} matches, {} vertices, {} edges",
        out.matching.pairs.len(),
        out.fused.vertex_count(),
        out.fused.edges.len()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(args.data.join("manifest.json"))
        .with_context(|| format!("loading manifest from {}", args.data.display()))?;
    let params = ModelParams::load(&args.params)
        .with_context(|| format!("reading {}", args.params.display()))?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split '{other}' (expected train, val, or test)"),
    };
    let d = match args.d.as_str() {
        "auto" => None,
        num => Some(
            num.parse::<f64>()
                .with_context(|| format!("--d must be a number or 'auto', got '{num}'"))?,
        ),
    };
    for &gap in &args.gaps {
        if gap % 2 == 0 {
            bail!("evaluation gaps must be odd so the center frame exists, got {gap}");
        }
    }
    let report = evaluate(&params, &manifest, &args.data, &args.gaps, args.t, d, split)?;
    std::fs::write(&args.output, report.to_csv())
        .with_context(|| format!("writing {}", args.output.display()))?;
    let canvas = manifest.config.canvas;
    println!(
        "search diameter d = {}",
        d.unwrap_or_else(|| default_search_diameter(canvas, canvas))
    );
    for &gap in &args.gaps {
        match report.mean_cd(gap) {
            Some(mean) => println!(
                "gap {gap}: mean CD {:.4} x 1e-5 over {} pairs",
                mean * 1e5,
                report.pairs.iter().filter(|p| p.gap == gap).count()
            ),
            None => println!("gap {gap}: no valid pairs"),
        }
    }
    Ok(())
}
