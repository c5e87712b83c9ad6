//! `scribseg` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 bad input data or configuration,
//! 4 runtime failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();

    let result = cli
        .overrides
        .resolve()
        .map_err(anyhow::Error::from)
        .and_then(|config| match cli.command {
            Command::Train(a) => commands::train(&config, &a),
            Command::Infer(a) => commands::infer(&config, &cli.overrides, &a),
            Command::Eval(a) => commands::eval(&config, &a),
            Command::Viz(a) => commands::viz(&config, &a),
            Command::Serve(a) => commands::serve(config, &a),
            Command::Synth(a) => commands::synth(&config, &a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<scribseg::Error>() {
        Some(inner) if inner.is_data_contract() => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}
