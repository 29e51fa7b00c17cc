use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = reuselab_cli::Cli::parse();
    match reuselab_cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(reuselab_cli::exit_code(&e))
        }
    }
}
