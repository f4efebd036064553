use std::process::ExitCode;

use clap::Parser;
use spikeconv_cli::args::{Cli, Command};
use spikeconv_cli::{commands, exit_code, EXIT_USAGE};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenFixture(a) => commands::cmd_gen_fixture(a).map(drop),
        Command::Convert(a) => commands::cmd_convert(a).map(drop),
        Command::Run(a) => commands::cmd_run(a).map(drop),
        Command::Sweep(a) => commands::cmd_sweep(a).map(drop),
        Command::Report(a) => commands::cmd_report(a).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
