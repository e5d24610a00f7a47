use std::process::ExitCode;

use bdc_cli::{run, Cli, CliError};
use clap::Parser;

fn threads() -> Result<usize, CliError> {
    match std::env::var("BDC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!("BDC_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let setup = threads().and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))
    });
    let result = setup.and_then(|()| run(cli, &mut std::io::stdout().lock(), &mut std::io::stderr().lock()));
    match result {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
