use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use mgbrnn_cli::commands::{self, cmd_ablate, cmd_baseline, cmd_eval, cmd_generate, cmd_train};
use mgbrnn_cli::{ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "mgbrnn", version, about = "Gated Bayesian recurrent filter experiments")]
struct Args {
    command: Command,
    /// Experiment config, or a manifest written by an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate (default: <out>/train/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress lines on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Command {
    Generate,
    Train,
    Eval,
    Ablate,
    Baseline,
}

fn run(args: &Args) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let config = config.resolve()?;
    let quiet = args.quiet;
    let mut log = |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    };
    match args.command {
        Command::Generate => {
            let data = cmd_generate(&config)?;
            println!(
                "wrote {} train / {} val / {} test trajectories to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                config.out.join(commands::DATA_DIR).display()
            );
        }
        Command::Train => {
            let outcome = cmd_train(&config, &mut log)?;
            println!(
                "best epoch {} (val loss {:.6}), outputs in {}",
                outcome.report.best_epoch,
                outcome.report.best_val_loss,
                config.out.join(commands::TRAIN_DIR).display()
            );
        }
        Command::Eval => {
            let metrics = cmd_eval(&config, args.checkpoint.as_deref(), &mut log)?;
            print!("{}", metrics.table());
        }
        Command::Baseline => {
            let metrics = cmd_baseline(&config, &mut log)?;
            print!("{}", metrics.table());
        }
        Command::Ablate => {
            let rows = cmd_ablate(&config, &mut log)?;
            println!("{:<8} {:>12} {:>14} {:>10}", "scheme", "RMSE", "RMSE (pos)", "MSE [dB]");
            for r in rows {
                println!(
                    "{:<8} {:>12.5} {:>14.5} {:>10.3}",
                    r.scheme, r.rmse_full, r.rmse_position, r.mse_db
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
