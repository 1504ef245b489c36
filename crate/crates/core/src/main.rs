use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlgp::cli::{cmd_evaluate, cmd_fit, cmd_infer, cmd_lono, cmd_simulate, CommandArgs};

/// Variational latent Gaussian process inference for spike trains.
#[derive(Parser)]
#[command(name = "vlgp", version = vlgp::io::version())]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate a data set.
    Simulate,
    /// Fit the model to a data set.
    Fit,
    /// Infer latents with fitted parameters held fixed.
    Infer,
    /// Leave-one-neuron-out prediction on held-out trials.
    Lono,
    /// Compute metrics and plot data for a fit.
    Evaluate,
}

fn run(cli: Cli) -> vlgp::Result<()> {
    let (Some(config), Some(out)) = (cli.config, cli.out) else {
        return Err(vlgp::Error::Validation("--config and --out are required".into()));
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(vlgp::Error::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| vlgp::Error::Validation(format!("cannot set up {n} threads: {e}")))?;
    }
    let args = CommandArgs {
        config,
        out,
        seed: cli.seed,
    };
    match cli.command {
        Command::Simulate => cmd_simulate(&args).map(drop),
        Command::Fit => cmd_fit(&args).map(drop),
        Command::Infer => cmd_infer(&args).map(drop),
        Command::Lono => cmd_lono(&args).map(drop),
        Command::Evaluate => cmd_evaluate(&args).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VLGP_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
