//! Command-line driver: training, evaluation, parameter audit, gradient
//! checking, and perturbation grids.

pub mod commands;
pub mod config;

use std::fmt;
use std::io::ErrorKind;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Exit status 2 for usage/config problems, 1 for runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<pathcaps::Error> for CliError {
    fn from(e: pathcaps::Error) -> Self {
        use pathcaps::Error as E;
        let msg = e.to_string();
        match e {
            E::Config { .. } => CliError::Usage(msg),
            E::Io { ref source, .. } if source.kind() == ErrorKind::NotFound => CliError::Usage(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pathcaps", version, about = "PathCapsNet training and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, keep the best checkpoint by validation error, log metrics.
    Train {
        #[command(flatten)]
        spec: config::SpecOverrides,
        #[command(flatten)]
        train: config::TrainOverrides,
    },
    /// Test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Evaluate only the first `n` test images.
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        /// Where eval.csv goes; defaults to the checkpoint's directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Exact parameter count with a per-component breakdown.
    Params {
        #[command(flatten)]
        spec: config::SpecOverrides,
    },
    /// Finite-difference check of backpropagated gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        /// Check a single routing mode instead of both.
        #[arg(long, value_parser = config::parse_routing)]
        routing: Option<pathcaps::capsules::RoutingMode>,
        /// Sampled coordinates per parameter tensor.
        #[arg(long, default_value_t = 2)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, hide = true, value_enum)]
        corrupt: Option<commands::Corruption>,
    },
    /// Grid of reconstructions while sweeping DigitCaps coordinates.
    Perturb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Test-set image to analyse.
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// Capsule to perturb; defaults to the predicted digit.
        #[arg(long)]
        digit: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = -0.25, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 0.25, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { spec, train } => commands::cmd_train(&RunConfig::resolve(&spec, Some(&train))?),
        Command::Eval {
            checkpoint,
            data_dir,
            test_limit,
            batch_size,
            out_dir,
        } => commands::cmd_eval(&commands::EvalArgs {
            checkpoint,
            data_dir,
            test_limit,
            batch_size,
            out_dir,
        }),
        Command::Params { spec } => commands::cmd_params(&RunConfig::resolve(&spec, None)?),
        Command::Gradcheck {
            seed,
            iterations,
            routing,
            coords,
            eps,
            corrupt,
        } => commands::cmd_gradcheck(&commands::GradcheckArgs {
            seed,
            iterations,
            routing,
            coords,
            eps,
            corrupt,
        }),
        Command::Perturb {
            checkpoint,
            data_dir,
            image_index,
            digit,
            dims,
            lo,
            hi,
            step,
            out,
        } => commands::cmd_perturb(&commands::PerturbArgs {
            checkpoint,
            data_dir,
            image_index,
            digit,
            dims,
            sweep: pathcaps::model::Sweep { lo, hi, step },
            out,
        }),
    }
}
