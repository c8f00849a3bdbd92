use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Exit status for input, usage and config problems.
const EXIT_CONFIG: u8 = 2;
/// Exit status for non-finite values during training or inference.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "jaecbf", version, about = "Joint echo cancellation and beamforming toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for the command's random source (dataset or training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, default_value_t = 0, global = true)]
    threads: usize,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated corpus and its manifest.
    Simulate(commands::SimulateArgs),
    /// Train a model on the train split of a corpus.
    Train(commands::TrainArgs),
    /// Process one mixture with a trained model or a baseline.
    Enhance(commands::EnhanceArgs),
    /// Score a system over a corpus split.
    Evaluate(commands::EvaluateArgs),
    /// Run the signal-processing baselines on one mixture.
    Baseline(commands::BaselineArgs),
    /// Finite-difference gradient checks.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let g = &cli.global;
    let res = match cli.command {
        Command::Simulate(a) => commands::simulate(g, &a),
        Command::Train(a) => commands::train(g, &a),
        Command::Enhance(a) => commands::enhance(g, &a),
        Command::Evaluate(a) => commands::evaluate(g, &a),
        Command::Baseline(a) => commands::baseline(g, &a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                jaecbf::Error::NonFinite(_) => ExitCode::from(EXIT_NUMERIC),
                _ => ExitCode::from(EXIT_CONFIG),
            }
        }
    }
}
