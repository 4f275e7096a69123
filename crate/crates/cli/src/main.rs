//! `snurnnt`: train, decode, verify and profile spiking-unit transducers.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::DecodeMode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] snurnnt::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(snurnnt::Error::Divergence { .. }) => 3,
            CliError::Core(_) => 1,
            CliError::Verification(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "snurnnt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set training.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, per-epoch checkpoints and log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training set (overrides paths.train).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out set for per-epoch token error (overrides paths.eval).
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Output directory (overrides paths.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop early; the schedule still spans every configured epoch.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Decode a dataset with a trained checkpoint, one JSON record per line.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<DecodeMode>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        max_symbols: Option<usize>,
        /// Hypothesis file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter/multiplication counts and optional decode timing.
    Profile {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Utterance lengths (frames) to time, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for counts.csv and timing.csv; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the parameter/multiplication count table.
    Count {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one backward rule (fault injection for testing the check).
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Generate the synthetic transduction task.
    GenData(commands::GenDataArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            cfg,
            data,
            eval,
            out,
            max_epochs,
        } => commands::train(&cfg.require()?, &cfg.overrides, data, eval, out, max_epochs),
        Command::Decode {
            cfg,
            checkpoint,
            data,
            mode,
            beam_width,
            max_symbols,
            out,
        } => commands::decode(
            cfg.config.as_deref(),
            &cfg.overrides,
            &checkpoint,
            &data,
            mode,
            beam_width,
            max_symbols,
            out.as_deref(),
        ),
        Command::Profile {
            cfg,
            lengths,
            repeats,
            seed,
            out,
        } => commands::profile(cfg.config.as_deref(), &cfg.overrides, &lengths, repeats, seed, out.as_deref()),
        Command::Count { cfg } => commands::count(cfg.config.as_deref(), &cfg.overrides),
        Command::Gradcheck {
            cfg,
            tol,
            seed,
            corrupt_op,
        } => commands::gradcheck(cfg.config.as_deref(), &cfg.overrides, tol, seed, corrupt_op.as_deref()),
        Command::GenData(args) => commands::gen_data(&args),
    }
}

impl ConfigArgs {
    fn require(&self) -> Result<PathBuf, CliError> {
        self.config
            .clone()
            .ok_or_else(|| CliError::Usage("--config is required".into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
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
