//! `robfpca`: robust functional PCA from the command line.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 numerical failure.

mod commands;
mod config;
mod io;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use robfpca::ComponentRule;

use config::{GlobalArgs, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<robfpca::Error> for CliError {
    fn from(e: robfpca::Error) -> Self {
        if e.is_input_error() {
            CliError::Input(e.to_string())
        } else {
            CliError::Numeric(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "robfpca", version, about = "Robust functional principal component analysis for sparse functional data")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate mean, covariance, eigenfunctions and scores from a subject_id,time,value CSV
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Keep exactly this many components
        #[arg(long, conflicts_with = "fve")]
        components: Option<usize>,
        /// Keep the fewest components reaching this fraction of variance
        #[arg(long)]
        fve: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        mean_bandwidths: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        cov_bandwidths: Option<Vec<f64>>,
        /// Refit the mean on every training fold during covariance cross-validation
        #[arg(long)]
        refit_mean_in_cv: bool,
    },
    /// Draw a dataset from the simulation model
    Simulate {
        /// normal, student-t, symmetric-log-normal, centered-beta or pinned
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        contamination: Option<f64>,
        #[arg(long)]
        basis_count: Option<usize>,
        #[arg(long)]
        noise_sd: Option<f64>,
    },
    /// Monte Carlo error tables
    Reproduce {
        /// mean or covariance
        #[arg(long, default_value = "mean")]
        table: String,
        /// loss,population,n,m, e.g. rho0,normal,100,5 (repeatable)
        #[arg(long = "cell")]
        cells: Vec<String>,
        /// Losses for the standard cells when no --cell is given, e.g. rho0,rho1:0.001,rho1-tuned
        #[arg(long, value_delimiter = ',')]
        losses: Option<Vec<String>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        basis_count: Option<usize>,
        #[arg(long)]
        truth_samples: Option<usize>,
        #[arg(long)]
        truth_reps: Option<usize>,
        /// clean or contaminated
        #[arg(long)]
        truth_population: Option<String>,
    },
    /// Render mean.csv, eigen.csv or a loss function as SVG
    Plot {
        /// mean, eigen or loss
        #[arg(long)]
        kind: String,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
        /// Half-width of the x range for loss plots
        #[arg(long, default_value_t = 3.0)]
        range: f64,
    },
    /// Scores of a dataset under a fitted model.json
    Scores {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
    },
    /// Curves rebuilt from scores, on the model grid or at the dataset's observation times
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(&cli.global)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit { data, components, fve, mean_bandwidths, cov_bandwidths, refit_mean_in_cv } => {
            if let Some(k) = components {
                cfg.fit.components = ComponentRule::Fixed(k);
            }
            if let Some(f) = fve {
                cfg.fit.components = ComponentRule::Fve(f);
            }
            if mean_bandwidths.is_some() {
                cfg.fit.mean_bandwidths = mean_bandwidths;
            }
            if cov_bandwidths.is_some() {
                cfg.fit.cov_bandwidths = cov_bandwidths;
            }
            if refit_mean_in_cv {
                cfg.fit.refit_mean_in_cv = true;
            }
            commands::fit(&cfg, &data)
        }
        Command::Simulate { family, n, m, contamination, basis_count, noise_sd } => {
            commands::simulate(&mut cfg, &commands::SimulateArgs { family, n, m, contamination, basis_count, noise_sd })
        }
        Command::Reproduce { table, cells, losses, runs, basis_count, truth_samples, truth_reps, truth_population } => {
            let args = commands::ReproduceArgs { table, cells, losses, runs, basis_count, truth_samples, truth_reps, truth_population };
            commands::reproduce(&mut cfg, &args)
        }
        Command::Plot { kind, input, components, range } => {
            commands::plot(&cfg, &commands::PlotArgs { kind, input, components, range })
        }
        Command::Scores { model, data, components } => commands::scores(&cfg, &model, &data, components),
        Command::Reconstruct { model, scores, data, components } => {
            commands::reconstruct_cmd(&cfg, &commands::ReconstructArgs { model, scores, data, components })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("robfpca: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
