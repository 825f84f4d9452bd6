mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use kpl_core::ErrorKind;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Plan(a) => commands::plan(a),
        Command::Learn(a) => commands::learn(a),
        Command::Classify(a) => commands::classify(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pipeline(a) => commands::run_pipeline(a),
        Command::BenchOt(a) => commands::bench_ot(a),
        Command::GenFixture(a) => commands::gen_fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric | ErrorKind::Internal => 3,
            })
        }
    }
}
