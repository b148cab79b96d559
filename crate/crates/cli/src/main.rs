//! `deeppce` command-line front end.

mod commands;
mod config;
mod error;
mod parse;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "deeppce", version, about = "Deep polynomial chaos surrogates with exact moment queries")]
struct Cli {
    /// Directory receiving every output plus manifest.json. Defaults to
    /// `[output].run_dir` from the config, else `run`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Problem {
    /// The 100-variable analytic benchmark.
    #[value(name = "100d")]
    Bench100d,
    /// Seeded quadratic map with U(−1, 1) inputs.
    QuadraticMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QueryKind {
    Mean,
    Cov,
    CondMean,
    CondCov,
    CovCondExp,
    ExpCondCov,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a benchmark dataset (tensor format, or CSV for a .csv name).
    GenData {
        #[arg(long, value_enum)]
        problem: Problem,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File name inside the run directory.
        #[arg(long)]
        out: PathBuf,
        /// Input width for the quadratic map.
        #[arg(long, default_value_t = 64)]
        inputs: usize,
        /// Output width for the quadratic map.
        #[arg(long, default_value_t = 16)]
        outputs: usize,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[data].path`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "model.dpce")]
        out_model: PathBuf,
        /// Overrides `[train].n_restarts`.
        #[arg(long)]
        restarts: Option<usize>,
        /// Overrides `[train].seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[train].max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a model on a dataset and report the relative MSE.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
    },
    /// Exact moment queries (batch norm is folded first).
    Moments {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        query: QueryKind,
        /// Conditioning values, 1-based: `1=0.5,3=-1`.
        #[arg(long)]
        condition: Option<String>,
        /// Variable set, 1-based: `1,2`.
        #[arg(long)]
        set: Option<String>,
        /// Also write the result into the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// First-order Sobol indices, optionally timed against Monte Carlo.
    Sobol {
        #[arg(long)]
        model: PathBuf,
        /// Rescale each output's indices to sum to one.
        #[arg(long)]
        normalize_sum: bool,
        #[arg(long, default_value = "sobol.json")]
        out: PathBuf,
        /// Also run the pick-and-freeze estimator with about this many
        /// model evaluations (e.g. 1e7).
        #[arg(long)]
        mc_baseline: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact versus Monte Carlo for all five queries, with t-tests.
    McCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 30)]
        runs: usize,
        #[arg(long, default_value = "1e5,1e6,1e7")]
        sizes: String,
        /// Conditioning set for the expected conditional covariance, 1-based.
        #[arg(long, default_value = "1")]
        set: String,
        /// Conditioning values; drawn from the marginals of the set when absent.
        #[arg(long)]
        condition: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report name; a `.tsv` table is written next to it.
        #[arg(long, default_value = "mc_check.json")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let run_dir = cli.run_dir;
    match cli.command {
        Command::GenData {
            problem,
            n,
            seed,
            out,
            inputs,
            outputs,
        } => commands::gen_data(run_dir, problem, n, seed, &out, inputs, outputs),
        Command::Train {
            config,
            data,
            out_model,
            restarts,
            seed,
            epochs,
        } => commands::train(run_dir, &config, data, &out_model, restarts, seed, epochs),
        Command::Predict { model, data, out } => commands::predict(run_dir, &model, &data, &out),
        Command::Moments {
            model,
            query,
            condition,
            set,
            out,
        } => commands::moments(run_dir, &model, query, condition.as_deref(), set.as_deref(), out.as_deref()),
        Command::Sobol {
            model,
            normalize_sum,
            out,
            mc_baseline,
            seed,
        } => commands::sobol(run_dir, &model, normalize_sum, &out, mc_baseline.as_deref(), seed),
        Command::McCheck {
            model,
            runs,
            sizes,
            set,
            condition,
            seed,
            out,
        } => commands::mc_check(run_dir, &model, runs, &sizes, &set, condition.as_deref(), seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid usage");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
