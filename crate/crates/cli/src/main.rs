//! `cfmine`: generate data, train, mine, evaluate and sweep.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cfmine_core::config::{Ablation, RunConfig};
use cfmine_core::embedding::pairwise_similarity;
use cfmine_core::eval::{evaluate_retrieval, mining_accuracy, rank_gallery, MetricsReport};
use cfmine_core::io;
use cfmine_core::mining::{mine_all_with, PairSelection};
use cfmine_core::pipeline::{run_experiment, run_sweep, Datasets, SweepParam};
use cfmine_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NO_PAIRS: u8 = 4;
const EXIT_K_TOO_LARGE: u8 = 5;

/// Cross-camera positive-pair mining and metric refinement.
#[derive(Parser)]
#[command(name = "cfmine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the virtual, real and held-out test datasets.
    Generate(ConfigArgs),
    /// Pretrain, mine and fine-tune, then write the report and checkpoints.
    Run(RunArgs),
    /// Dump positive pairs mined with a checkpoint.
    Mine(MineArgs),
    /// Retrieval metrics of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Repeat `run` over values of one hyper-parameter.
    Sweep(SweepArgs),
    /// Print a complete run config for a built-in profile.
    Config(ProfileArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config (JSON). Without it the benchmark profile is used and
    /// `--seed` is required.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-derive every seed in the config from this master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Allow positives from the anchor's own camera.
    #[arg(long)]
    no_cross_camera: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    no_cross_camera: bool,
    /// Pick positives uniformly from the reciprocal set instead.
    #[arg(long)]
    random_selection: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Neighborhood size for the mining-accuracy diagnostic.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    no_cross_camera: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    ranks: Vec<usize>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-query average precision as CSV.
    #[arg(long)]
    per_query_ap: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// One of k, lambda, anchors_per_batch, margin, n_p, n_e.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long, value_enum, default_value_t = Profile::Benchmark)]
    profile: Profile,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Desk-scale synthetic benchmark.
    Benchmark,
    /// Benchmark data with the full-scale training hyper-parameters.
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Cf,
    Random,
    None,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Cf => Ablation::Cf,
            AblationArg::Random => Ablation::Random,
            AblationArg::None => Ablation::None,
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let cfg = match (&args.config, args.seed) {
        (Some(path), seed) => {
            let cfg = RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?;
            match seed {
                Some(s) => cfg.with_seed(s),
                None => cfg,
            }
        }
        (None, Some(seed)) => RunConfig::benchmark(seed),
        (None, None) => {
            return Err(Error::InvalidConfig {
                field: "seed".into(),
                reason: "pass --config or --seed; seeds are never taken from the clock".into(),
            }
            .into())
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(mut cfg: RunConfig, o: &Overrides) -> Result<RunConfig> {
    if let Some(a) = o.ablation {
        cfg.ablation = a.into();
    }
    if let Some(k) = o.k {
        cfg.train.k = k;
    }
    if let Some(l) = o.lambda {
        cfg.train.lambda = l;
    }
    if o.no_cross_camera {
        cfg.train.exclude_same_camera = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(args: &ConfigArgs, cfg: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("cfmine-out"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn generate(args: ConfigArgs) -> Result<()> {
    let cfg = load_config(&args)?;
    let dir = out_dir(&args, &cfg);
    Datasets::generate(&cfg)?.write(&dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    eprintln!("wrote datasets to {}", dir.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = apply_overrides(load_config(&args.config)?, &args.overrides)?;
    let dir = out_dir(&args.config, &cfg);
    fs::create_dir_all(&dir)?;
    let outcome = run_experiment(&cfg)?;
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(&dir.join("report.json"), &outcome.report)?;
    io::write_checkpoint_file(&dir.join("coarse.ckpt"), &outcome.coarse_params)?;
    io::write_checkpoint_file(&dir.join("final.ckpt"), &outcome.final_params)?;
    if !outcome.final_pairs.is_empty() {
        let real = Datasets::load_or_generate(&cfg)?.real;
        let file = BufWriter::new(fs::File::create(dir.join("pairs.csv"))?);
        io::write_pairs_csv(file, &outcome.final_pairs, real.embeddings.meta())?;
    }
    let r = &outcome.report;
    eprintln!(
        "rank-1 {:.4}  mAP {:.4}  (coarse rank-1 {:.4})  -> {}",
        r.rank1().unwrap_or(0.0),
        r.map.unwrap_or(0.0),
        r.coarse.as_ref().map(|c| c.rank1()).unwrap_or(0.0),
        dir.display()
    );
    Ok(())
}

fn mine(args: MineArgs) -> Result<()> {
    let params = io::read_checkpoint_file(&args.checkpoint)?;
    let ds = io::read_dataset_file(&args.dataset)?;
    let embedded = params.embed_matrix(&ds.embeddings)?;
    let s = pairwise_similarity(&embedded)?;
    let selection = match args.random_selection {
        Some(seed) => PairSelection::Random { seed },
        None => PairSelection::CollaborativeFiltering,
    };
    let outcome = mine_all_with(
        &s,
        ds.embeddings.meta(),
        args.k,
        !args.no_cross_camera,
        selection,
    )?;
    match &args.out {
        Some(path) => {
            let file = BufWriter::new(fs::File::create(path)?);
            io::write_pairs_csv(file, &outcome.pairs, ds.embeddings.meta())?;
        }
        None => io::write_pairs_csv(
            std::io::stdout().lock(),
            &outcome.pairs,
            ds.embeddings.meta(),
        )?,
    }
    eprintln!(
        "{} pairs, {} anchors skipped",
        outcome.pairs.len(),
        outcome.skipped
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let params = io::read_checkpoint_file(&args.checkpoint)?;
    let ds = io::read_dataset_file(&args.dataset)?;
    let embedded = params.embed_matrix(&ds.embeddings)?;
    let mut report = MetricsReport {
        map: None,
        cmc: None,
        mining_accuracy: None,
        negative_collision_rate: None,
        evaluated_queries: 0,
        excluded_queries: 0,
        coarse: None,
        history: Vec::new(),
        notes: Default::default(),
    };
    if ds.embeddings.has_ground_truth() {
        let metrics = evaluate_retrieval(&embedded, &args.ranks)?;
        report.map = Some(metrics.map);
        report.cmc = Some(metrics.cmc);
        report.evaluated_queries = metrics.evaluated_queries;
        report.excluded_queries = metrics.excluded_queries;
        if args.k < ds.len() {
            let s = pairwise_similarity(&embedded)?;
            let pairs = mine_all_with(
                &s,
                ds.embeddings.meta(),
                args.k,
                !args.no_cross_camera,
                PairSelection::CollaborativeFiltering,
            )?
            .pairs;
            if !pairs.is_empty() {
                report.mining_accuracy = Some(mining_accuracy(&pairs, ds.embeddings.meta())?);
            }
        }
        if let Some(path) = &args.per_query_ap {
            let lists = rank_gallery(&embedded, &embedded)?;
            let file = BufWriter::new(fs::File::create(path)?);
            io::write_per_query_ap_csv(file, &lists, ds.embeddings.meta())?;
        }
    } else {
        report.notes.insert(
            "ground_truth".into(),
            "absent; retrieval metrics omitted".into(),
        );
    }
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = apply_overrides(load_config(&args.config)?, &args.overrides)?;
    let param: SweepParam = args.param.parse()?;
    let dir = out_dir(&args.config, &cfg);
    fs::create_dir_all(&dir)?;
    let results = run_sweep(&cfg, param, &args.values)?;
    let mut summary = Vec::new();
    for (value, report) in &results {
        write_json(&dir.join(format!("{}_{value}.json", param.name())), report)?;
        summary.push(serde_json::json!({
            "value": value,
            "rank1": report.rank1(),
            "mAP": report.map,
            "mining_accuracy": report.mining_accuracy,
        }));
        eprintln!(
            "{} = {value}: rank-1 {:.4}",
            param.name(),
            report.rank1().unwrap_or(0.0)
        );
    }
    write_json(
        &dir.join("sweep.json"),
        &serde_json::json!({ "param": param.name(), "results": summary }),
    )?;
    Ok(())
}

fn print_profile(args: ProfileArgs) -> Result<()> {
    let mut cfg = RunConfig::benchmark(args.seed);
    if let Profile::Reference = args.profile {
        let seed = cfg.train.seed;
        cfg.train = cfmine_core::TrainConfig::reference(seed);
    }
    println!("{}", cfg.to_json());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidConfig { .. }) => EXIT_VALIDATION,
        Some(Error::Io(_) | Error::Format { .. } | Error::Csv(_) | Error::Json(_)) => EXIT_IO,
        Some(Error::NoPairsMined { .. }) => EXIT_NO_PAIRS,
        Some(Error::KTooLarge { .. }) => EXIT_K_TOO_LARGE,
        Some(_) => EXIT_FAILURE,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => EXIT_IO,
        None => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("CFMINE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Mine(a) => mine(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Config(a) => print_profile(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
