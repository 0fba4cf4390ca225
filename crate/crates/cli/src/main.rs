mod args;
mod commands;
mod failure;
mod record;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;

use crate::failure::Failure;

fn fail(f: &Failure) -> ExitCode {
    eprintln!("{f}");
    ExitCode::from(f.kind.code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(&Failure::usage(first.trim_start_matches("error: ")));
        }
    };
    let started = Instant::now();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = commands::run(&cli.command)
        .and_then(|run| record::write_record(&run, argv, started.elapsed().as_secs_f64()));
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}
