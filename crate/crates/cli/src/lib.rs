//! Command-line driver: degrade, train, restore, eval, gradcheck, ablate and synth.

pub mod commands;
pub mod config;
pub mod error;
pub mod suite;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

pub use config::{Overrides, Profile, RunConfig};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "facegraph", version, about = "Joint face completion and super-resolution with patch-graph convolutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Downsample and mask the 128×128 images of --data into --out.
    Degrade,
    /// Train on --data, writing checkpoint, losses and config into --out.
    Train,
    /// Restore the degraded images in --data with --checkpoint.
    Restore {
        /// Ground-truth directory; adds grids/comparison.png (truth / input / output rows).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// PSNR/SSIM of --restored against --data, or of --checkpoint on degraded --data.
    Eval {
        #[arg(long)]
        restored: Option<PathBuf>,
    },
    /// Finite-difference check of every trainable component.
    Gradcheck,
    /// Train and score the M1/M2/M3 variants under one seed.
    Ablate,
    /// Write synthetic face images into --out.
    Synth {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 144)]
        size: usize,
    },
}

/// Run a parsed command, returning its summary.
pub fn run(cli: &Cli) -> Result<String> {
    let f = &cli.flags;
    match &cli.command {
        Command::Degrade => commands::degrade(f),
        Command::Train => commands::train(f),
        Command::Restore { gt } => commands::restore_dir(f, gt.as_deref()),
        Command::Eval { restored } => commands::eval(f, restored.as_deref()),
        Command::Gradcheck => commands::gradcheck(f),
        Command::Ablate => commands::ablate(f),
        Command::Synth { count, size } => commands::synth(f, *count, *size),
    }
}

/// Parse `args`, run, print, and return the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
