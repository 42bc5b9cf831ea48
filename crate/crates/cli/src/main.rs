mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::json;

use crate::args::Cli;

fn error_line(kind: &str, command: &str, message: &str) {
    let line = json!({ "error": kind, "command": command, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let command = std::env::args().nth(1).unwrap_or_default();
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            error_line("usage", &command, first);
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), cli.command.name(), &e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
