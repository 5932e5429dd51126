//! The `dep` command line: data, embeddings, LM pretraining, training,
//! generation, evaluation and the experiment grid.
//!
//! Every command prints a one-line JSON summary on success. Failures print
//! one JSON line on stderr and exit with 2 (config), 3 (data) or 4
//! (numerical).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub use config::{Overrides, Paths, Resolved, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dep", about = "Difference-aware embedding personalization at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of retrieved histories.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub refinement: Option<String>,
    /// `desk` or `paper`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Run directory for every unset path.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Validate and normalize a corpus given as main + meta files.
    Ingest {
        #[arg(long)]
        main: PathBuf,
        #[arg(long)]
        meta: PathBuf,
    },
    /// Write a seeded synthetic corpus.
    Synth,
    /// Precompute the representation cache for every split instance.
    Embed,
    #[command(name = "pretrain-lm")]
    PretrainLm,
    Train,
    /// Predictions for the test split from the saved checkpoint.
    Generate,
    /// Metrics of a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Mode and refinement grid.
    Ablate,
    /// Metrics for K = 0..=k retrieved histories.
    #[command(name = "sweep-k")]
    SweepK,
    /// Metrics of the unique and non-unique user groups.
    Uniqueness,
    /// Render every report in the reports directory as tables.
    Report,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            k: self.k,
            mode: self.mode.clone(),
            refinement: self.refinement.clone(),
            preset: self.preset.clone(),
        }
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply(&self.overrides())?;
        Ok(c)
    }
}

pub fn execute(cli: &Cli) -> Result<Value> {
    let cfg = cli.run_config()?;
    let run = commands::Run::new(cfg, &cli.out);
    commands::dispatch(&run, &cli.command)
}

/// Single-line machine-parsable error record.
pub fn error_line(e: &Error) -> String {
    json!({"error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string()}).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line(&Error::Config(first.trim_start_matches("error: ").to_string())));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            e.exit_code()
        }
    }
}
