mod args;
mod commands;
mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use manifest::{merge_config, MergeError};

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const CHECK_FAILED: u8 = 2;
    pub const RUNTIME: u8 = 3;
}

/// What a command reports back: whether every proved inequality held.
pub enum Outcome {
    Done,
    DeterministicFailure,
}

fn parse(argv: Vec<OsString>) -> Result<(Cli, Vec<OsString>), u8> {
    let merged = match merge_config(argv) {
        Ok(a) => a,
        Err(MergeError::Usage(e)) => return Err(report_clap(e)),
        Err(MergeError::Config(e)) => {
            eprintln!("error: {e:#}");
            return Err(exit::USAGE);
        }
    };
    match Cli::try_parse_from(merged.clone()) {
        Ok(cli) => Ok((cli, merged)),
        Err(e) => Err(report_clap(e)),
    }
}

fn report_clap(e: clap::Error) -> u8 {
    use clap::error::ErrorKind;
    let _ = e.print();
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            exit::OK
        }
        _ => exit::USAGE,
    }
}

fn run(argv: Vec<OsString>, depth: usize) -> u8 {
    let (cli, argv) = match parse(argv) {
        Ok(v) => v,
        Err(code) => return code,
    };
    if depth == 0 {
        init_logging(cli.verbose);
        if let Some(j) = cli.jobs {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
                eprintln!("error: cannot size the worker pool: {e}");
                return exit::RUNTIME;
            }
        }
    }
    if let Command::Rerun(r) = &cli.command {
        if depth > 0 {
            eprintln!("error: a manifest cannot itself record a rerun");
            return exit::USAGE;
        }
        let recorded = match std::fs::read_to_string(&r.manifest)
            .map_err(anyhow::Error::from)
            .and_then(|t| manifest::RunManifest::parse(&t))
            .and_then(|m| m.argv())
        {
            Ok(a) => a,
            Err(e) => {
                eprintln!("error: {}: {e:#}", r.manifest.display());
                return exit::USAGE;
            }
        };
        return run(recorded, depth + 1);
    }
    match commands::execute(&cli, &argv) {
        Ok(Outcome::Done) => exit::OK,
        Ok(Outcome::DeterministicFailure) => {
            eprintln!("error: a proved inequality was violated");
            exit::CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<kdbound::Error>() {
                Some(kdbound::Error::InvalidArgument(_)) => exit::USAGE,
                _ => exit::RUNTIME,
            }
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect(), 0))
}
