//! `guard` command-line driver: generation, evaluation, the strategy
//! benchmark, Monte Carlo property checks and trace plots.
//!
//! Exit status 2 means the configuration was rejected before any work,
//! 1 a runtime failure or a failed check.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod generate;
pub mod plot;
pub mod source;
pub mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::Overrides;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "guard", version, about = "Entropy-guided decoding engine")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a continuation for every prompt.
    Generate,
    /// Diversity and coherence of generated continuations.
    Eval {
        /// Generation output or one token-id sequence per line.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Strategy-only per-token cost on a synthetic model.
    Bench {
        #[arg(long)]
        context_len: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long, value_name = "D")]
        representation_dim: Option<usize>,
    },
    /// Monte Carlo checks of the global-entropy estimator.
    VerifyProps {
        /// Replications per bias experiment.
        #[arg(long)]
        replications: Option<usize>,
    },
    /// One SVG per run of a trace file, written to --output (a directory).
    PlotTrace,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let resolved = cli.overrides.resolve()?;
    let mut cfg = resolved.config;
    match cli.command {
        Command::Generate => generate::cmd_generate(&cfg),
        Command::Eval { input } => eval::cmd_eval(&cfg, resolved.provider_explicit, &input),
        Command::Bench {
            context_len,
            repetitions,
            representation_dim,
        } => {
            cfg.bench.context_len = context_len.unwrap_or(cfg.bench.context_len);
            cfg.bench.repetitions = repetitions.unwrap_or(cfg.bench.repetitions);
            cfg.bench.representation_dim =
                representation_dim.unwrap_or(cfg.bench.representation_dim);
            bench::cmd_bench(&cfg)
        }
        Command::VerifyProps { replications } => {
            cfg.verify.replications = replications.unwrap_or(cfg.verify.replications);
            verify::cmd_verify_props(&cfg)
        }
        Command::PlotTrace => plot::cmd_plot_trace(cfg.trace.as_deref(), cfg.output.as_deref()),
        Command::ShowConfig => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("guard: {e}");
            e.exit_code()
        }
    }
}
