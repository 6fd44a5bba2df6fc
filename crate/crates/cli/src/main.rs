mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spikegrad_core::error::Error;

/// Exit codes shared by every subcommand.
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_SHAPE: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "spikegrad", version, about = "Event-driven spiking network trainer and its integer ANN twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network described by a TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Run the engine equivalence, discretization, gradient and ordering checks.
    Verify(VerifyArgs),
    /// Export synaptic-operation and spike-count CSVs for checkpoints.
    Trace(TraceArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out_dir: std::path::PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    #[arg(long, default_value = "integer")]
    pub engine: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Dataset directory, overriding `dataset_path`.
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    /// Use at most this many training examples per epoch.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Evaluate on at most this many test examples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Write a checkpoint every this many epochs (0 keeps only the final one).
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long, default_value = "integer")]
    pub engine: String,
    /// Evaluate the first N test images only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write one predicted class per line to this file.
    #[arg(long)]
    pub predictions: Option<std::path::PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Randomized dense networks for the equivalence and discretization checks.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Additional randomized convolution/pooling networks.
    #[arg(long, default_value_t = 100)]
    pub conv_trials: usize,
    #[arg(long, default_value_t = 100)]
    pub gradcheck_coords: usize,
    #[arg(long, default_value_t = 100)]
    pub order_networks: usize,
    #[arg(long, default_value_t = 10)]
    pub permutations: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Test hook: residual boundary used by the event engine instead of 1/2.
    #[arg(long)]
    pub fault_residual_boundary: Option<f64>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<std::path::PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    /// A checkpoint file, or a directory whose `*.spkg` files are traced in name order.
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub data: Option<std::path::PathBuf>,
    #[arg(long, default_value = "integer")]
    pub engine: String,
    /// Error scales to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub alpha_list: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parse { .. } | Error::Config(_) | Error::Input(_) => EXIT_USAGE,
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::Shape(_) => EXIT_SHAPE,
            Error::State(_) | Error::Internal(_) => EXIT_VERIFY,
        };
        let message = match &e {
            Error::Config(list) if list.len() > 1 => {
                format!("invalid configuration:\n  {}", list.join("\n  "))
            }
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

pub fn io_failure(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::Train(a) => a.common.threads,
        Command::Eval(a) => a.threads,
        Command::Verify(a) => a.threads,
        Command::Trace(a) => a.common.threads,
    };
    let result = init_threads(threads).and_then(|_| match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
        Command::Trace(a) => commands::trace(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
