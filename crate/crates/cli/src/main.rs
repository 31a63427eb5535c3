mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use forestnmt::Error;

use args::{Cli, Command};
use commands::Outcome;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Num(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Forest(_)
        | Error::Contract(_)
        | Error::Data(_)
        | Error::Alignment { .. }
        | Error::Checkpoint(_)
        | Error::Io(_) => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }

    let result = match &cli.command {
        Command::Train(a) => commands::cmd_train(a),
        Command::Translate(a) => commands::cmd_translate(a),
        Command::Eval(a) => commands::cmd_eval(a),
        Command::Check(a) => commands::cmd_check(a),
        Command::Vocab(a) => commands::cmd_vocab(a),
        Command::Synth(a) => commands::cmd_synth(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
