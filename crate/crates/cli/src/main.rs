//! `specwave` command line: simulate, fit, predict, cross-validate,
//! orthogonalize, and compare space–wavelength regression models.
//!
//! Every command takes an explicit seed (or reads one from the chain
//! configuration) and writes its outputs plus a run manifest under `--out`.
//! Outputs are byte-reproducible given the same inputs and seed; only the
//! stage timings inside `run_manifest.json` vary between runs.
//!
//! Log verbosity is controlled by the `SPECWAVE_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`); the default is `info`.

mod commands;
mod inputs;
mod manifest;

use clap::Parser;
use specwave::error::Error;

#[derive(Debug, Parser)]
#[command(
    name = "specwave",
    version,
    about = "Hierarchical space-wavelength regression for spectral curves",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Simulate(commands::simulate::SimulateArgs),
    /// Run the sampler and store posterior draws.
    Fit(commands::fit::FitArgs),
    /// Draw from the posterior predictive at observed or new sites.
    Predict(commands::predict::PredictArgs),
    /// Score one or more models by cross-validation or a shared holdout.
    Crossval(commands::crossval::CrossvalArgs),
    /// Orthogonalized coefficients, variance decomposition, importance.
    Orthogonalize(commands::orthogonalize::OrthogonalizeArgs),
    /// Fit several models in full and compare their DIC.
    Compare(commands::compare::CompareArgs),
}

/// Diagnostic category and process exit code for an error.
fn category(err: &Error) -> (&'static str, i32) {
    match err {
        Error::Config(_) => ("config", 2),
        Error::Parse { .. } => ("parse", 3),
        Error::Data(_) | Error::Dimension { .. } => ("data", 4),
        Error::Io { .. } => ("io", 5),
        Error::Numeric(_) | Error::Factorization { .. } => ("numeric", 6),
    }
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("SPECWAVE_LOG", "info"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[config]: could not size the thread pool: {e}");
            std::process::exit(2);
        }
    }

    let outcome = match &cli.command {
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Predict(args) => commands::predict::run(args),
        Command::Crossval(args) => commands::crossval::run(args),
        Command::Orthogonalize(args) => commands::orthogonalize::run(args),
        Command::Compare(args) => commands::compare::run(args),
    };
    if let Err(e) = outcome {
        let (cat, code) = category(&e);
        eprintln!("error[{cat}]: {e}");
        std::process::exit(code);
    }
}
