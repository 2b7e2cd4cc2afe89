use std::process::ExitCode;

use clap::Parser;
use micromix::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("micromix: {e}");
            ExitCode::FAILURE
        }
    }
}
