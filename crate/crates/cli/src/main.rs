use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rana_cli::commands::{self, Output};
use rana_cli::{exit, CliResult};
use rana_core::Exec;

/// Adaptive rank allocation: decompose, calibrate, compress and evaluate linear layers and MLPs.
///
/// Exit codes: 0 success, 1 runtime failure or failed check, 2 malformed
/// input or arguments, 3 shape mismatch, 4 infeasible budget, 5 missing file
/// or bundle. RANA_THREADS caps the worker count.
#[derive(Parser)]
#[command(name = "rana", version)]
struct Cli {
    /// Print only machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Activation-aware factorization of one weight matrix.
    Decompose(commands::DecomposeArgs),
    /// Synthesize calibration inputs.
    Calibrate(commands::CalibrateArgs),
    /// Allocate a FLOP budget across a model bundle and write the adapted bundle.
    Compress(commands::CompressArgs),
    /// Held-out normalized error of an adapted bundle.
    Eval(commands::EvalArgs),
    /// Matched-FLOP comparison against baseline adapters.
    Compare(commands::CompareArgs),
    /// Histogram of normalized rank contributions.
    Hist(commands::HistArgs),
    /// Masked GEMV latency by density.
    Bench(commands::BenchArgs),
    /// Check the rank-adapted form of a ReLU MLP against neuron masking.
    ReluCheck(commands::ReluCheckArgs),
    /// Write a trained toy SwiGLU model bundle.
    ToyFixture(commands::ToyFixtureArgs),
    /// Logit divergence of a compressed toy transformer.
    Divergence(commands::DivergenceArgs),
}

fn configure_threads() -> CliResult<Exec> {
    let threads = commands::threads_from_env(std::env::var("RANA_THREADS").ok().as_deref())?;
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(commands::exec_for_threads(threads))
}

fn run(cli: &Cli) -> CliResult<Output> {
    let exec = configure_threads()?;
    match &cli.command {
        Command::Decompose(a) => commands::decompose(a, exec),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Compress(a) => commands::compress(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Compare(a) => commands::compare(a, exec),
        Command::Hist(a) => commands::hist(a, exec),
        Command::Bench(a) => commands::bench(a),
        Command::ReluCheck(a) => commands::relu_check(a),
        Command::ToyFixture(a) => commands::toy_fixture(a),
        Command::Divergence(a) => commands::divergence(a, exec),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("json values serialize"));
            } else {
                print!("{}", out.text);
                if !out.text.ends_with('\n') {
                    println!();
                }
            }
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
