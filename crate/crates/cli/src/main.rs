mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::CliError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    radformer_tensor::parallel::init_threads(radformer_tensor::parallel::threads_from_env());
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::RoiBench(a) => commands::roi_bench(a),
        Command::Map(a) => commands::map(a),
        Command::Explain(a) => commands::explain(a),
        Command::Synth(a) => commands::synth(a),
        Command::Presets(a) => commands::presets(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Data(_) => 3,
            })
        }
    }
}
