use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpbn::commands::{self, CliError, Overrides};

/// Deterministic projected belief network auto-encoder.
#[derive(Parser)]
#[command(name = "dpbn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Model file (overrides `output.model`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, model: self.model.clone(), out: self.out.clone() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess data, train, write the model file and CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Suppress per-evaluation progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print train/test MSE and test sampling efficiency of a model.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Write original/reconstruction PGM pairs and a per-sample error table.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Number of test samples (default: all).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn init_threads() {
    if let Some(n) = std::env::var("DPBN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, quiet } => {
            let out = commands::cmd_train(&common.config, &common.overrides(), !quiet)?;
            if let Some(r) = out.log.last() {
                println!(
                    "epoch={} mse_train={} mse_test={} efficiency={}",
                    r.epoch, r.train_mse, r.test_mse, r.efficiency
                );
            }
            eprintln!("wrote {} and {}", out.model_path.display(), out.log_path.display());
        }
        Command::Eval { common } => {
            println!("{}", commands::cmd_eval(&common.config, &common.overrides())?);
        }
        Command::Reconstruct { common, count } => {
            let n = commands::cmd_reconstruct(&common.config, &common.overrides(), count)?;
            eprintln!("wrote {n} reconstruction pairs");
        }
        Command::Gradcheck { config } => {
            let r = commands::cmd_gradcheck(config.as_deref())?;
            println!("max_rel_err={} threshold={} params={}", r.max_rel_err, r.threshold, r.params);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::GradcheckFailed(v) = &e {
                println!("max_rel_err={v}");
            }
            eprintln!("dpbn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
