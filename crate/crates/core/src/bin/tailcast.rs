use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tailcast::cli::{run_evaluate, run_fit_density, run_synth, run_train, RunConfig};
use tailcast::Error;

/// Batch experiments for extreme-event regression: generate or ingest a
/// time series, fit the target density, train loss-function ensembles, and
/// evaluate the event-aware metric suite.
#[derive(Parser)]
#[command(name = "tailcast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic burst benchmark configured under [dataset.synth].
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the target density on the training segment and store it with the
    /// normalization statistics.
    FitDensity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one ensemble per (loss, lead time). Completed members are
    /// skipped when the run manifest matches; a mismatch aborts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel training workers (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Explicitly continue a partial run. Resuming is also the default
        /// whenever the on-disk manifest matches this configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained ensembles on the test segment and write metric
    /// reports and aggregate curves.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Replace predictions with the true targets (harness self-test).
        #[arg(long)]
        perfect: bool,
    },
}

fn load_config(path: &PathBuf, out: Option<PathBuf>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    Ok(cfg)
}

fn config_error_code(err: &Error) -> Option<u8> {
    match err {
        Error::BadParameter(_)
        | Error::InvalidSpec(_)
        | Error::ParseFile { .. }
        | Error::MissingColumn(_)
        | Error::NonNumericCell { .. }
        | Error::NonUniformTimeGrid { .. } => Some(2),
        _ => None,
    }
}

fn density_error_code(err: &Error) -> Option<u8> {
    match err {
        Error::DegenerateRange
        | Error::DegenerateChannel(_)
        | Error::TooFewSamples(_)
        | Error::Conditioning { .. }
        | Error::InvalidInput(_) => Some(3),
        _ => None,
    }
}

fn fail(err: Error, code: u8) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = match load_config(&config, out) {
                Ok(c) => c,
                Err(e) => return fail(e, 2),
            };
            match run_synth(&cfg) {
                Ok(path) => {
                    println!("wrote {}", path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let code = config_error_code(&e).unwrap_or(2);
                    fail(e, code)
                }
            }
        }
        Command::FitDensity { config, out } => {
            let cfg = match load_config(&config, out) {
                Ok(c) => c,
                Err(e) => return fail(e, 2),
            };
            match run_fit_density(&cfg) {
                Ok(summary) => {
                    println!(
                        "density fit: lengthscale={:.6} sigma2={:.6} occupied_bins={} max|log residual|={:.4}",
                        summary.lengthscale,
                        summary.signal_var,
                        summary.occupied_bins,
                        summary.max_abs_log_residual
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    let code = density_error_code(&e)
                        .or_else(|| config_error_code(&e))
                        .unwrap_or(1);
                    fail(e, code)
                }
            }
        }
        Command::Train {
            config,
            out,
            workers,
            resume: _,
        } => {
            let cfg = match load_config(&config, out) {
                Ok(c) => c,
                Err(e) => return fail(e, 2),
            };
            match run_train(&cfg, workers) {
                Ok(summary) => {
                    println!(
                        "trained {} member(s), skipped {} already on disk",
                        summary.trained, summary.skipped
                    );
                    for (loss, tau, seed, msg) in &summary.failures {
                        eprintln!("member failed: loss={} tau={tau} seed={seed}: {msg}", loss.name());
                    }
                    ExitCode::SUCCESS
                }
                Err(Error::ResumeMismatch) => fail(Error::ResumeMismatch, 4),
                Err(e) => {
                    let code = config_error_code(&e).unwrap_or(1);
                    fail(e, code)
                }
            }
        }
        Command::Evaluate {
            config,
            out,
            workers,
            perfect,
        } => {
            let cfg = match load_config(&config, out) {
                Ok(c) => c,
                Err(e) => return fail(e, 2),
            };
            match run_evaluate(&cfg, workers, perfect) {
                Ok(()) => {
                    println!("evaluation complete");
                    ExitCode::SUCCESS
                }
                Err(e @ Error::MissingModels(_)) => fail(e, 5),
                Err(e) => {
                    let code = config_error_code(&e).unwrap_or(1);
                    fail(e, code)
                }
            }
        }
    }
}
