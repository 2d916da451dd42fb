//! Command-line driver for `ksinv`: TOML configuration, target generation and
//! run directories.

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use run::Command;

#[derive(Debug, Parser)]
#[command(name = "ksinv", version, about = "Excited-state inverse problem for non-interacting fermions on a grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Find a potential whose level-k state reproduces the target density.
    Invert(RunArgs),
    /// Invert the level density of a known potential and compare.
    Reconstruct(RunArgs),
    /// Invert one density from several starting potentials.
    Nonuniqueness(RunArgs),
    /// Invert, then compare the best pure and mixed states of the level.
    PureCheck(RunArgs),
    /// One-body and N-body spectra of a potential.
    Spectrum(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; must not exist.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "KSINV_THREADS")]
    pub threads: Option<usize>,
}

/// Runs the parsed command line and returns the process exit code.
pub fn run_cli(cli: Cli) -> i32 {
    let (command, args) = match cli.command {
        Sub::Invert(a) => (Command::Invert, a),
        Sub::Reconstruct(a) => (Command::Reconstruct, a),
        Sub::Nonuniqueness(a) => (Command::Nonuniqueness, a),
        Sub::PureCheck(a) => (Command::PureCheck, a),
        Sub::Spectrum(a) => (Command::Spectrum, a),
    };
    if let Some(threads) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let mut config = match run::load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            log::error!("{e:#}");
            return run::classify(&e);
        }
    };
    if let Some(seed) = args.seed {
        config.apply_seed(seed);
    }
    let out = args.out.unwrap_or_else(|| run::default_out(command));
    run::execute(command, &config, &out)
}
