use std::process::ExitCode;

use clap::Parser;
use lorasharp_cli::args::Cli;
use lorasharp_cli::{run, EXIT_USAGE};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lorasharp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
