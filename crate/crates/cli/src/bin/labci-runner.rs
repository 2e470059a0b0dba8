use std::process::ExitCode;

use clap::Parser;

use labci_cli::agent::{self, RunnerArgs};

/// Runner agent: claims jobs from a labci server and executes them.
#[derive(Parser)]
#[command(name = "labci-runner", version)]
struct Cli {
    #[command(flatten)]
    args: RunnerArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    labci_cli::reset_sigpipe();
    labci_cli::init_tracing();
    let stop = labci_cli::stop_flag_on_signal();
    labci_cli::exit_with(agent::run(&cli.args, &stop))
}
