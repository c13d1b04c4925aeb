mod bench;
mod config;
mod opts;
mod report;
mod selftest;
mod simulate;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opts::{BenchHeArgs, BenchLayerArgs, DpBoundArgs, HardnessArgs, SelftestArgs, SimulateArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "duet", version, about = "Two-party private neural network training")]
struct Cli {
    /// Flat key=value file; each key sets the PENCIL_<KEY> default.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<std::path::PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train in the clear with the protocol's fixed-point arithmetic.
    Simulate(SimulateArgs),
    /// One party of private training (or both, with --role local).
    Train(TrainArgs),
    /// Produce mask banks for every linear layer and store them.
    Prep(TrainArgs),
    /// Microbenchmarks of the homomorphic primitives.
    BenchHe(BenchHeArgs),
    /// Time and traffic of one linear layer in both modes.
    BenchLayer(BenchLayerArgs),
    /// Brute-force hardness of the mask bank.
    Hardness(HardnessArgs),
    /// Noise multiplier needed for a DP target.
    DpBound(DpBoundArgs),
    /// Quick oracle checks of every building block.
    Selftest(SelftestArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let raw: Vec<String> = std::env::args().collect();
    if let Some(path) = config::find_config_arg(&raw) {
        if let Err(e) = config::apply_file(std::path::Path::new(&path)) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let cli = Cli::parse_from(raw);
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(&a),
        Command::Train(a) => train::run(&a, false),
        Command::Prep(a) => train::run(&a, true),
        Command::BenchHe(a) => bench::bench_he(&a),
        Command::BenchLayer(a) => bench::bench_layer(&a),
        Command::Hardness(a) => bench::hardness(&a),
        Command::DpBound(a) => bench::dp_bound(&a),
        Command::Selftest(a) => selftest::run(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
