//! `partseg` command-line driver.
//!
//! Exit status is 0 on success, 1 when the configuration is rejected and 2
//! when reading or writing files fails. Failures print one line to standard
//! error of the form `error kind=<Kind> message="<text>"`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partseg::archive::{read_weights_archive, write_episode_archive, write_weights_archive};
use partseg::eval::{ablate, evaluate, task_seed, EpisodeSource, EvalConfig};
use partseg::pipeline::derive_seed;
use partseg::sampler::{EpisodeShape, ImagePool};
use partseg::synth::{generate_synthetic_episode, SynthConfig};
use partseg::train::{train_message_weights_with, SgdOptions};
use partseg::{Error, HyperParams, MessageWeights};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "partseg",
    version,
    about = "Part-aware prototype few-shot segmentation on feature grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic evaluation on archives or synthetic episodes
    Eval(EvalArgs),
    /// Train the message-passing weights and write a weights archive
    Train(TrainArgs),
    /// Write synthetic episode archives
    SynthGen(SynthGenArgs),
    /// Parametric, nonparametric and refinement-free evaluation in one report
    Ablate(EvalArgs),
}

#[derive(Args, Clone)]
struct PipelineArgs {
    /// Parts per class
    #[arg(long, default_value_t = 5)]
    n_parts: usize,
    /// Candidate regions across all unlabeled grids
    #[arg(long, default_value_t = 100)]
    n_regions: usize,
    /// Region selection threshold on cosine similarity
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    sigma: f32,
    /// Weight of class context added to each part
    #[arg(long, default_value_t = 0.8)]
    lambda_p: f32,
    /// Weight of region features added to each part
    #[arg(long, default_value_t = 0.2)]
    lambda_r: f32,
    /// Softmax scale applied to scores in the training loss
    #[arg(long, default_value_t = 20.0)]
    temperature: f32,
    /// Use the identity in place of the learned message weights
    #[arg(long)]
    nonparametric_gnn: bool,
    #[arg(long, default_value_t = 50)]
    kmeans_max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    kmeans_tol: f64,
    #[arg(long, default_value_t = 0.1)]
    slic_compactness: f64,
    #[arg(long, default_value_t = 10)]
    slic_iters: usize,
}

impl PipelineArgs {
    fn params(&self) -> HyperParams {
        HyperParams {
            n_parts: self.n_parts,
            n_regions: self.n_regions,
            sigma: self.sigma,
            lambda_p: self.lambda_p,
            lambda_r: self.lambda_r,
            score_temperature: self.temperature,
            nonparametric_gnn: self.nonparametric_gnn,
            kmeans_max_iter: self.kmeans_max_iter,
            kmeans_tol: self.kmeans_tol,
            slic_compactness: self.slic_compactness,
            slic_iters: self.slic_iters,
        }
    }
}

#[derive(Args, Clone)]
struct ShapeArgs {
    /// Classes per episode
    #[arg(long, default_value_t = 1)]
    n_way: usize,
    /// Labeled support images per class
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Unlabeled support grids per episode
    #[arg(long, default_value_t = 6)]
    n_unlabeled: usize,
    /// Query images (per class when sampling from archives)
    #[arg(long, default_value_t = 1)]
    n_query: usize,
}

impl ShapeArgs {
    fn shape(&self) -> EpisodeShape {
        EpisodeShape {
            c_way: self.n_way,
            k_shot: self.k_shot,
            n_unlabeled: self.n_unlabeled,
            n_query: self.n_query,
        }
    }
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Feature channels of synthetic grids
    #[arg(long, default_value_t = 64)]
    n_ch: usize,
    #[arg(long, default_value_t = 32)]
    grid_h: usize,
    #[arg(long, default_value_t = 32)]
    grid_w: usize,
    /// Image pixels per feature cell
    #[arg(long, default_value_t = 4)]
    stride: usize,
    /// Size of the synthetic class vocabulary
    #[arg(long, default_value_t = 20)]
    n_classes: usize,
    /// Norm of each class mean
    #[arg(long, default_value_t = 10.0)]
    separation: f32,
    /// Per-cell noise level
    #[arg(long, default_value_t = 0.1)]
    jitter: f32,
    /// Per-image appearance shift of each class
    #[arg(long, default_value_t = 0.0)]
    appearance: f32,
    /// Weight of a direction shared by all classes
    #[arg(long, default_value_t = 0.0)]
    shared: f32,
    /// Seed of the class means
    #[arg(long, default_value_t = 0)]
    world_seed: u64,
}

impl SynthArgs {
    fn config(&self, shape: &ShapeArgs) -> SynthConfig {
        SynthConfig {
            n_ch: self.n_ch,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            stride: self.stride,
            n_way: shape.n_way,
            k_shot: shape.k_shot,
            n_unlabeled: shape.n_unlabeled,
            n_query: shape.n_query,
            n_classes: self.n_classes,
            separation: self.separation,
            jitter: self.jitter,
            appearance: self.appearance,
            shared: self.shared,
            world_seed: self.world_seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Generate episodes instead of reading archives
    #[arg(
        long,
        conflicts_with = "episodes_dir",
        required_unless_present = "episodes_dir"
    )]
    synth: bool,
    /// Directory of episode archives pooled for sampling
    #[arg(long)]
    episodes_dir: Option<PathBuf>,
    /// Comma-separated class identifiers to sample from (default: all in the pool)
    #[arg(long, value_delimiter = ',', requires = "episodes_dir")]
    fold_classes: Option<Vec<u8>>,
    #[command(flatten)]
    synth_args: SynthArgs,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Independent runs, each with seed `seed + run`
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Episodes per run
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Weights archive (default: the initial weights)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Report path (default: standard output)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Training episodes, visited in turn
    #[arg(long, default_value_t = 20)]
    tasks: usize,
    /// SGD steps
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Starting weights archive (default: the initial weights)
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output weights archive
    #[arg(long)]
    out: PathBuf,
    /// Loss trace path (default: standard output)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SynthGenArgs {
    #[command(flatten)]
    synth_args: SynthArgs,
    #[command(flatten)]
    shape: ShapeArgs,
    /// Number of archives
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

/// Episodes for a subcommand, with the pool kept alive for borrowing.
enum Loaded {
    Synth(SynthConfig),
    Pool {
        pool: ImagePool,
        fold: Vec<u8>,
        shape: EpisodeShape,
    },
}

impl Loaded {
    fn load(source: &SourceArgs, shape: &ShapeArgs) -> Result<Self, Error> {
        check_shape(shape)?;
        match &source.episodes_dir {
            None => {
                let cfg = source.synth_args.config(shape);
                cfg.validate()?;
                Ok(Loaded::Synth(cfg))
            }
            Some(dir) => {
                let pool = ImagePool::from_dir(dir)?;
                let fold = source
                    .fold_classes
                    .clone()
                    .unwrap_or_else(|| pool.classes());
                Ok(Loaded::Pool {
                    pool,
                    fold,
                    shape: shape.shape(),
                })
            }
        }
    }

    fn source(&self) -> EpisodeSource<'_> {
        match self {
            Loaded::Synth(cfg) => EpisodeSource::Synth(*cfg),
            Loaded::Pool { pool, fold, shape } => EpisodeSource::Pool {
                pool,
                fold: fold.clone(),
                shape: *shape,
            },
        }
    }

    fn channels(&self) -> usize {
        match self {
            Loaded::Synth(cfg) => cfg.n_ch,
            Loaded::Pool { pool, .. } => pool.images.first().map_or(0, |i| i.features.channels()),
        }
    }
}

fn check_shape(shape: &ShapeArgs) -> Result<(), Error> {
    if shape.n_way == 0 || shape.k_shot == 0 || shape.n_query == 0 {
        return Err(Error::InvalidConfig(
            "n_way, k_shot and n_query must be positive".into(),
        ));
    }
    Ok(())
}

fn load_weights(path: Option<&Path>, dim: usize) -> Result<MessageWeights, Error> {
    let weights = match path {
        Some(p) => read_weights_archive(p)?,
        None => MessageWeights::initial(dim),
    };
    if weights.dim() != dim {
        return Err(Error::InvalidConfig(format!(
            "weights are {0}x{0} but features have {dim} channels",
            weights.dim()
        )));
    }
    Ok(weights)
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<(), Error> {
    let mut json =
        serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    json.push('\n');
    match out {
        Some(p) => fs::write(p, json)?,
        None => std::io::stdout().write_all(json.as_bytes())?,
    }
    Ok(())
}

fn run_eval(args: &EvalArgs, ablation: bool) -> Result<(), Error> {
    let params = args.pipeline.params();
    params.validate()?;
    let config = EvalConfig {
        runs: args.runs,
        tasks: args.tasks,
        seed: args.seed,
        jobs: args.jobs,
    };
    if config.runs == 0 || config.tasks == 0 || config.jobs == 0 {
        return Err(Error::InvalidConfig(
            "runs, tasks and jobs must be positive".into(),
        ));
    }
    let loaded = Loaded::load(&args.source, &args.shape)?;
    let weights = load_weights(args.weights.as_deref(), loaded.channels())?;
    let source = loaded.source();
    if ablation {
        emit(
            &ablate(&source, &params, &weights, &config)?,
            args.out.as_deref(),
        )
    } else {
        emit(
            &evaluate(&source, &params, &weights, &config)?,
            args.out.as_deref(),
        )
    }
}

#[derive(Serialize)]
struct TrainReport {
    steps: usize,
    episodes: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    losses: Vec<f64>,
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let params = args.pipeline.params();
    params.validate()?;
    if params.nonparametric_gnn {
        return Err(Error::NonparametricMode);
    }
    if args.tasks == 0 {
        return Err(Error::InvalidConfig("tasks must be positive".into()));
    }
    let opts = SgdOptions {
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
    };
    let loaded = Loaded::load(&args.source, &args.shape)?;
    let weights = load_weights(args.weights.as_deref(), loaded.channels())?;
    let source = loaded.source();
    let episodes = (0..args.tasks)
        .map(|t| source.episode(derive_seed(task_seed(args.seed, 0, t), 0)))
        .collect::<Result<Vec<_>, _>>()?;
    let outcome =
        train_message_weights_with(&episodes, &weights, &opts, args.steps, &params, args.seed)?;
    write_weights_archive(&outcome.weights, &args.out)?;
    let report = TrainReport {
        steps: args.steps,
        episodes: args.tasks,
        lr: args.lr,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        losses: outcome.losses,
    };
    emit(&report, args.report.as_deref())
}

fn run_synth_gen(args: &SynthGenArgs) -> Result<(), Error> {
    check_shape(&args.shape)?;
    let cfg = args.synth_args.config(&args.shape);
    cfg.validate()?;
    fs::create_dir_all(&args.out)?;
    for i in 0..args.count {
        let episode = generate_synthetic_episode(&SynthConfig {
            seed: derive_seed(args.seed, i as u64),
            ..cfg
        })?;
        write_episode_archive(&episode, &args.out.join(format!("episode_{i:05}.zip")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .map(|l| l.trim().trim_start_matches("error: "))
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("error kind=Usage message={:?}", message.join(" "));
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Eval(a) => run_eval(a, false),
        Command::Ablate(a) => run_eval(a, true),
        Command::Train(a) => run_train(a),
        Command::SynthGen(a) => run_synth_gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
