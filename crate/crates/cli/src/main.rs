use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rvd_cli::commands::{self, parse_tamper, parse_variance_mode, TrainHooks};
use rvd_cli::{CliError, RunConfig};
use rvd_core::diagnostics::SelfcheckOptions;
use rvd_core::VarianceMode;

#[derive(Parser)]
#[command(name = "rvd", version, about = "Residual video diffusion on the command line")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes loss.csv and checkpoints into out_dir.
    Train {
        config: PathBuf,
        #[arg(long, hide = true)]
        inject_nan_at: Option<u64>,
    },
    /// Sample future frames from a checkpoint.
    Generate {
        config: PathBuf,
        checkpoint: PathBuf,
        /// A TensorFile video, or `test:<index>` for a test video of the
        /// configured dataset.
        context: String,
        /// Ensemble size; defaults to the config's ensemble_size.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Score an ensemble directory against a ground-truth future.
    EvalCrps {
        ensemble_dir: PathBuf,
        truth: PathBuf,
        out_dir: PathBuf,
    },
    /// Run the numerical diagnostics and print JSON lines.
    Selfcheck {
        #[arg(long, default_value = "sqrt_posterior", value_parser = parse_variance_mode)]
        variance_mode: VarianceMode,
        #[arg(long, default_value_t = 20)]
        grad_seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite one beta of the N = 100 schedule, as `n:beta`.
        #[arg(long, hide = true, value_parser = parse_tamper)]
        tamper_beta: Option<(usize, f64)>,
    },
    /// Write the configured dataset as TensorFiles.
    Dataset { config: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, inject_nan_at } => {
            let cfg = RunConfig::load(&config)?;
            let path = commands::train(&cfg, TrainHooks { inject_nan_at })?;
            println!("{}", path.display());
        }
        Command::Generate {
            config,
            checkpoint,
            context,
            samples,
        } => {
            let cfg = RunConfig::load(&config)?;
            let s = samples.unwrap_or(cfg.ensemble_size);
            for p in commands::generate_cmd(&cfg, &checkpoint, &context, s)? {
                println!("{}", p.display());
            }
        }
        Command::EvalCrps { ensemble_dir, truth, out_dir } => {
            let crps = commands::eval_crps(&ensemble_dir, &truth, &out_dir)?;
            println!("{crps:.6}");
        }
        Command::Selfcheck {
            variance_mode,
            grad_seeds,
            seed,
            tamper_beta,
        } => {
            let opts = SelfcheckOptions {
                variance_mode,
                grad_seeds,
                seed,
                tamper_beta,
            };
            commands::selfcheck(&opts, &mut std::io::stdout().lock())?;
        }
        Command::Dataset { config } => {
            let cfg = RunConfig::load(&config)?;
            println!("{}", commands::export_dataset(&cfg)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
