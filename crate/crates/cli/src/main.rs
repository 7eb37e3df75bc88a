//! `sci-deq`: simulate, reconstruct, train and analyse snapshot video
//! reconstructions from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::RunConfig;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Lib(#[from] sci_deq::Error),
    #[error("gradient check failed: max relative error {max_rel_err:.3e} > threshold {threshold:.3e}")]
    GradCheck { max_rel_err: f64, threshold: f64 },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use sci_deq::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::GradCheck { .. } => EXIT_GRADCHECK,
            CliError::Lib(e) => match e {
                E::Io { .. }
                | E::BadMagic { .. }
                | E::UnsupportedVersion { .. }
                | E::UnknownDtype { .. }
                | E::DtypeMismatch { .. }
                | E::Truncated { .. }
                | E::Parse { .. } => EXIT_IO,
                E::Diverged { .. } | E::TrainingAborted { .. } | E::NonFinite(_) | E::SingularAlpha => EXIT_DIVERGED,
                _ => EXIT_CONFIG,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sci-deq", version, about = "Deep-equilibrium reconstruction for snapshot video compressive sensing")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Record zero wall-clock times so outputs are byte-reproducible.
    #[arg(long, global = true)]
    no_timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a sensing mask.
    Mask {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a synthetic scene and simulate its snapshot.
    Simulate {
        /// Output directory for truth, mask, measurement and metadata.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a cube from a simulated snapshot.
    Reconstruct {
        /// Directory written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Reconstructed cube.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a DE-GAP denoiser or DE-RNN cell on synthetic scenes.
    Train {
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compare implicit gradients with central differences.
    Gradcheck {
        /// Checkpoint to check; defaults to a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Per-coordinate report CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projector spectrum, Jacobian norm and contraction bound on a small instance.
    Spectrum {
        /// Report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run reconstruction trajectories and write CSVs.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect the effective configuration.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print every key with its effective value.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if cli.no_timing {
        cfg.set("output.timing", "false")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Mask { out } => commands::mask(&cfg, &out),
        Command::Simulate { out } => commands::simulate(&cfg, &out),
        Command::Reconstruct { input, out, trace } => commands::reconstruct(&cfg, &input, &out, trace.as_deref()),
        Command::Train { out, log, init } => commands::train(&cfg, &out, log.as_deref(), init.as_deref()),
        Command::Gradcheck { checkpoint, out } => commands::gradcheck(&cfg, checkpoint.as_deref(), out.as_deref()),
        Command::Spectrum { out } => commands::spectrum(&cfg, out.as_deref()),
        Command::Bench { out } => commands::bench(&cfg, &out),
        Command::Config { action: ConfigAction::Dump { out } } => commands::dump_config(&cfg, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(config::help_table()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
