mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spikedepth::loss::LossMode;
use spikedepth::train::Branch;

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "spikedepth", version, about = "Spike-camera stereo depth with uncertainty-guided fusion")]
struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Loss mode for `train`: base or ugdf.
    #[arg(long, global = true)]
    mode: Option<LossMode>,
    /// Branches for `eval`, comma separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    branch: Vec<Branch>,
    #[arg(long, global = true)]
    window_width: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Renders one scene and fires both views, or fires a constant clip.
    Simulate {
        /// Fire a constant-intensity clip of the scene size instead.
        #[arg(long)]
        intensity: Option<f64>,
    },
    /// Generates scenes, fires them and writes a split manifest.
    BuildDataset {
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Trains on the train split of a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Stop after this many steps instead of running whole epochs.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Scores a trained model per branch, with interval accuracy.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory of a `train` run.
        #[arg(long)]
        model: PathBuf,
        /// Also write every sample's branch maps as DPTH files.
        #[arg(long)]
        save_maps: bool,
    },
    /// Guided fusion of precomputed DPTH maps.
    Fuse {
        #[arg(long)]
        mono: PathBuf,
        #[arg(long)]
        stereo: PathBuf,
        #[arg(long)]
        sigma_m: PathBuf,
        #[arg(long)]
        sigma_s: PathBuf,
    },
    /// Finite-difference check of every operator and the full network loss.
    Gradcheck,
    /// Pools the per-sample results of one or more `eval` runs.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let (iterations, scenes) = match &cli.command {
        Command::Train { iterations, .. } => (*iterations, None),
        Command::BuildDataset { scenes } => (None, *scenes),
        _ => (None, None),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        mode: cli.mode,
        branches: cli.branch.clone(),
        window_width: cli.window_width,
        epochs: cli.epochs,
        lr: cli.lr,
        iterations,
        scenes,
    });
    let out = cli.out;
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Simulate { intensity } => commands::simulate(cfg, &out, intensity),
        Command::BuildDataset { .. } => commands::build_dataset(cfg, &out),
        Command::Train { dataset, .. } => commands::train(cfg, &out, &dataset),
        Command::Eval { dataset, model, save_maps } => commands::eval(cfg, &out, &dataset, &model, save_maps),
        Command::Fuse {
            mono,
            stereo,
            sigma_m,
            sigma_s,
        } => commands::fuse(cfg, &out, [&mono, &stereo, &sigma_m, &sigma_s]),
        Command::Gradcheck => commands::gradcheck(cfg, &out),
        Command::Report { input } => commands::report(cfg, &out, &input),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
