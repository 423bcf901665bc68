use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coronet::config::{load_config, EncoderKind, RunConfig, ViewSet};
use coronet::pipeline::{self, ReconstructOptions};
use coronet::CliError;
use coronet_core::aso::AsoConfig;

#[derive(Parser)]
#[command(name = "coronet", version, about = "Coronary tree reconstruction from two projections with a neural field")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fixed-order reductions; bitwise reproducible results.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured encoder.
    #[arg(long, global = true, value_enum)]
    encoder: Option<EncoderKind>,
    /// Selects the geometry block (default: the configured `views`).
    #[arg(long, global = true, value_enum)]
    views: Option<ViewSet>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic vessel-tree phantom.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the two input projections of a volume.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Source volume (.raw, .nrrd, .nhdr, .nii); the phantom by default.
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the neural field to the simulated projections.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        /// Projection directory; derived from the config by default.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Ground truth for metric logging; the phantom by default.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Snapshot file to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a reconstruction against a reference at each threshold.
    Evaluate {
        /// Locates volume, reference and output from a run when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Almost-stochastic-order comparison of two sets of evaluation tables.
    Aso {
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean and std per metric per threshold over evaluation tables.
    Aggregate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(cli: &Cli, path: &Path) -> Result<RunConfig, CliError> {
    let cfg = load_config(path)?;
    let cfg = pipeline::with_overrides(cfg, cli.seed, cli.encoder, cli.deterministic, cli.threads);
    cfg.validate()?;
    Ok(cfg)
}

fn views(cli: &Cli, cfg: &RunConfig) -> ViewSet {
    cli.views.unwrap_or(cfg.views)
}

fn init_threads(n: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Phantom { config: c, out } => {
            let cfg = config(cli, c)?;
            pipeline::run_phantom(&cfg, out.as_deref())?;
        }
        Command::Simulate { config: c, volume, out } => {
            let cfg = config(cli, c)?;
            init_threads(cfg.threads)?;
            pipeline::run_simulate(&cfg, views(cli, &cfg), volume.as_deref(), out.as_deref())?;
        }
        Command::Reconstruct { config: c, run_id, inputs, reference, resume } => {
            let cfg = config(cli, c)?;
            init_threads(cfg.threads)?;
            let opts = ReconstructOptions {
                views: views(cli, &cfg),
                run_id: run_id.clone(),
                inputs: inputs.as_deref(),
                reference: reference.as_deref(),
                resume: resume.as_deref(),
                threads: rayon::current_num_threads(),
            };
            let summary = pipeline::run_reconstruct(&cfg, &opts)?;
            println!("{}", summary.dir.display());
        }
        Command::Evaluate { config: c, run_id, volume, reference, thresholds, out } => {
            let cfg = c.as_deref().map(|p| config(cli, p)).transpose()?;
            let run_dir = match (&cfg, run_id) {
                (Some(cfg), Some(id)) => Some(pipeline::run_dir(cfg, id)),
                (Some(cfg), None) => Some(pipeline::run_dir(cfg, &pipeline::default_run_id(cfg, views(cli, cfg)))),
                _ => None,
            };
            let need = |v: &Option<PathBuf>, derived: Option<PathBuf>, flag: &str| {
                v.clone().or(derived).ok_or_else(|| CliError::Config(format!("evaluate needs --{flag} or --config")))
            };
            let volume = need(volume, run_dir.as_ref().map(|d| d.join(pipeline::VOLUME_FINAL)), "volume")?;
            let reference = need(reference, cfg.as_ref().map(pipeline::phantom_path), "reference")?;
            let out = need(out, run_dir.as_ref().map(|d| d.join(pipeline::EVALUATION_CSV)), "out")?;
            let thresholds = thresholds
                .clone()
                .or_else(|| cfg.as_ref().map(|c| c.trainer.thresholds.clone()))
                .unwrap_or_else(|| vec![0.4, 0.5, 0.6]);
            let case = run_dir
                .as_ref()
                .and_then(|d| d.file_name())
                .or_else(|| volume.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let reports = pipeline::run_evaluate(&volume, &reference, &thresholds, &case, &out)?;
            for r in reports {
                println!("threshold {} dice {:.4} clDice {:?}", r.threshold, r.dice, r.cl_dice);
            }
        }
        Command::Aso { a, b, threshold, alpha, tau, bootstrap, out } => {
            let cfg = AsoConfig { alpha: *alpha, tau: *tau, n_bootstrap: *bootstrap, seed: cli.seed.unwrap_or(0) };
            let s = pipeline::run_aso(a, b, *threshold, &cfg, out)?;
            for (m, e) in &s.metrics {
                println!("{m}: epsilon_min {:?} dominant {:?}", e.epsilon_min, e.dominant);
            }
        }
        Command::Aggregate { inputs, out } => {
            print!("{}", pipeline::run_aggregate(inputs, out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
