use clap::{Parser, Subcommand};
use mmfusion::config::ExperimentConfig;
use mmfusion::error::Error;
use mmfusion::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmfusion", about = "multimodal fusion-layer experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model in the configured mode and write a run directory.
    Train {
        /// Experiment config (TOML), or a preset name: dominant | balanced_xor
        #[arg(long)]
        config: String,
        /// Override data/training/search seeds.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint over the missing-modality eta grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Eta grid override, e.g. --eta 1.0 --eta 0.3
        #[arg(long = "eta")]
        etas: Vec<f64>,
        #[arg(long, default_value = "runs/eval")]
        out_dir: PathBuf,
    },
    /// Train and evaluate over several seeds, aggregate mean/min/max.
    Sweep {
        #[arg(long)]
        config: String,
        #[arg(long = "seed", required = true)]
        seeds: Vec<u64>,
        #[arg(long = "eta")]
        etas: Vec<f64>,
        #[arg(long, default_value = "runs/sweep")]
        out_dir: PathBuf,
    },
    /// Print the recorded policy-search trajectory from a run directory.
    SearchHistory {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn load_config(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = match spec {
        "dominant" => ExperimentConfig::dominant_preset(seed.unwrap_or(0)),
        "balanced_xor" => ExperimentConfig::balanced_xor_preset(seed.unwrap_or(0)),
        path => ExperimentConfig::load(std::path::Path::new(path))?,
    };
    if let Some(seed) = seed {
        cfg.data.seed = seed;
        cfg.training.seed = seed;
        cfg.search.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out_dir,
        } => {
            let cfg = load_config(&config, seed)?;
            let artifacts = runner::run_train(&cfg, &out_dir)?;
            println!(
                "policy: {}",
                artifacts
                    .policy
                    .iter()
                    .map(|b| b.to_string())
                    .collect::<String>()
            );
            println!("checkpoint: {}", artifacts.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            etas,
            out_dir,
        } => {
            let etas = if etas.is_empty() { None } else { Some(etas) };
            let (_, table) = runner::run_eval(&checkpoint, etas, &out_dir)?;
            print!("{table}");
            println!("results: {}", out_dir.join("results.csv").display());
        }
        Command::Sweep {
            config,
            seeds,
            etas,
            out_dir,
        } => {
            let cfg = load_config(&config, None)?;
            let etas = if etas.is_empty() {
                cfg.eval.etas.clone()
            } else {
                etas
            };
            let path = runner::run_sweep(&cfg, &seeds, &etas, &out_dir)?;
            println!("sweep: {}", path.display());
        }
        Command::SearchHistory { out_dir } => {
            print!("{}", runner::run_search_history(&out_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::InvalidConfig(_) | Error::InvalidSpec(_))) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
