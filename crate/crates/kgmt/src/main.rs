use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use kgmt::cli::{init_logging, run, Cli};

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Some(p) = cli.config.as_ref().filter(|p| !p.is_file()) {
        Cli::command().error(ErrorKind::ValueValidation, format!("--config {} does not exist", p.display())).exit();
    }
    init_logging();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
