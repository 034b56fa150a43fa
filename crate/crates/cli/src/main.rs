//! `regverify`: generate, train, calibrate, evaluate, explain, serve, export.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.

mod args;
mod commands;
mod error;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use regverify_core::model::CHECKPOINT_VERSION;
use regverify_core::phantom::MANIFEST_FILE;

use crate::args::{Cli, Command};
use crate::error::{EXIT_OK, EXIT_VALIDATION};

fn version_json() -> String {
    serde_json::json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": CHECKPOINT_VERSION,
        "dataset_manifest": MANIFEST_FILE,
    })
    .to_string()
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit(EXIT_OK),
                _ => exit(EXIT_VALIDATION),
            };
        }
    };
    if cli.version {
        println!("{}", version_json());
        return exit(EXIT_OK);
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required\n\nUsage: regverify <COMMAND>\nRun `regverify --help` for the list.");
        return exit(EXIT_VALIDATION);
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp_millis()
        .init();
    let result = match command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train_fold(a),
        Command::Calibrate(a) => commands::calibrate_ckpt(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Explain(a) => commands::explain(a),
        Command::Serve(a) => commands::serve(a),
        Command::Export(a) => commands::export(a),
    };
    match result {
        Ok(()) => exit(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.exit_code())
        }
    }
}
