mod cli;
mod commands;
mod io;
mod plots;

use std::process::ExitCode;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::io::exit_code;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli.exp_root;
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&root, a),
        Command::TrainIdEncoder(a) => commands::train_id_encoder(&root, a),
        Command::TrainProbes(a) => commands::train_probes(&root, a),
        Command::TrainTeacher(a) => commands::train_teacher(&root, a),
        Command::TrainStudent(a) => commands::train_student(&root, a),
        Command::BuildTriplets(a) => commands::build_triplets(&root, a),
        Command::Swap(a) => commands::swap(&root, a),
        Command::Invert(a) => commands::invert(&root, a),
        Command::Eval(a) => commands::eval(&root, a),
        Command::AblateDegradation(a) => commands::ablate_degradation(&root, a),
        Command::AnalyzeNoise(a) => commands::analyze_noise(&root, a),
        Command::Benchmark(a) => commands::benchmark(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
