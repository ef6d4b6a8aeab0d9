use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

mod commands;
mod error;

use commands::Cli;
use error::{CliError, EXIT_USAGE};

fn report(err: &CliError, json: bool) {
    if json {
        let line = serde_json::json!({
            "error": err.kind(),
            "message": err.to_string(),
            "exit_code": err.exit_code(),
        });
        eprintln!("{line}");
    } else {
        eprintln!("error: {}", err.to_string().replace('\n', " "));
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let json = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json {
                let text = e.to_string();
                let first = text.lines().next().unwrap_or_default();
                report(
                    &CliError::Usage(first.trim_start_matches("error: ").to_string()),
                    true,
                );
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            report(&err, json);
            ExitCode::from(err.exit_code())
        }
    }
}
