//! The `grouptron` command-line pipeline.
//!
//! Every stage reads and writes plain files under `--out`, so stages can be run
//! and tested one at a time:
//!
//! ```text
//! ingest / synth → scenes.jsonl → windows → windows.jsonl → train → model.bin
//!                                                          → predict → predictions.jsonl
//!                                                          → eval → eval.csv, eval.json
//! ```
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or numeric errors.

mod args;
mod commands;
mod config;
mod files;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

pub use args::{Cli, Command, ProtocolArg};
pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 1.
    Usage(String),
    /// Failure while processing data; exit code 2.
    Core(grouptron::Error),
}

impl From<grouptron::Error> for CliError {
    fn from(e: grouptron::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Runs the pipeline on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{}", e.render());
            return 1;
        }
    };
    let Some(command) = cli.command else {
        eprintln!("{}", Cli::command().render_help());
        return 1;
    };
    match execute(&cli.global, &command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(global: &args::GlobalArgs, command: &Command) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(global)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = global.jobs {
        if n == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&global.out)?;
    pool.install(|| commands::dispatch(global, cfg, command))
}
