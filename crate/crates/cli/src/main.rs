use std::process::ExitCode;

use clap::Parser;

mod commands;
mod settings;

use settings::{Cli, Command, UsageError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = settings::load_file(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::DiscoverTtl(args) => commands::discover_ttl(args.resolve(&file)?),
        Command::Snoop(args) => commands::snoop(args.resolve(&file)?),
        Command::Report(args) => commands::report(args.resolve(&file)?),
        Command::Simulate(args) => commands::simulate(args),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
