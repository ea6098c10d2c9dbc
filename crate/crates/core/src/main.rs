use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dglm::io::{self, Estimator, RunConfig, SampleFormat};
use dglm::{DglmError, Result};

#[derive(Parser)]
#[command(name = "dglm", version, about = "Poisson time series with time-varying coefficients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Bayes,
    Kalman,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (overrides sampler.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides io.output).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Standard model 1..=8 (overrides the [model] section).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=8))]
    model: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV series.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        estimator: Option<EstimatorArg>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Input CSV (overrides io.input).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Simulate a dataset and its truth file.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Score a fit directory against a truth file.
    Score {
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// truth.json written by `simulate`.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Recompute diagnostics from a fit directory's samples file.
    Diagnose {
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Where to write the recomputed files (defaults to the fit directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(id) = common.model {
        cfg.set_model_id(id)?;
    }
    if cfg.model.id.is_none() && cfg.model.trend.is_none() {
        return Err(DglmError::Config("no model given: use --model or a [model] section".into()));
    }
    if let Some(seed) = common.seed {
        cfg.sampler.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig, common: &Common) -> PathBuf {
    match &common.out {
        Some(p) => p.clone(),
        None => cfg.resolve(&cfg.io.output),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { common, estimator, format, input } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = estimator {
                cfg.io.estimator = match e {
                    EstimatorArg::Bayes => Estimator::Bayes,
                    EstimatorArg::Kalman => Estimator::Kalman,
                    EstimatorArg::Both => Estimator::Both,
                };
            }
            if let Some(f) = format {
                cfg.io.format = match f {
                    FormatArg::Csv => SampleFormat::Csv,
                    FormatArg::Binary => SampleFormat::Binary,
                };
            }
            if let Some(path) = input {
                cfg.io.input = Some(std::path::absolute(&path).unwrap_or(path));
            }
            let input = cfg
                .io
                .input
                .as_ref()
                .map(|p| cfg.resolve(p))
                .ok_or_else(|| DglmError::Config("no input: use --input or io.input".into()))?;
            cfg.io.input = Some(std::path::absolute(&input).unwrap_or(input.clone()));
            let dataset = io::ingest_csv(&input, &cfg.io.columns)?;
            let out = output_dir(&cfg, &common);
            let outcome = io::run_fit(&cfg, &dataset, &out)?;
            println!("model {} fitted on {} days; wrote {}", cfg.model_config()?.model_id(), outcome.model.n(), out.display());
            if let Some(s) = &outcome.summary {
                println!("DIC {:.2} (pD {:.2})", s.dic.dic, s.dic.pd);
                if let Some(r) = s.max_rhat {
                    println!("max R-hat {r:.3}");
                }
            }
            if let Some(a) = &outcome.aic {
                println!(
                    "AIC {:.2} at variances {:?}{}",
                    a.best_row().aic,
                    a.best_row().variances,
                    if a.best_fit.converged { "" } else { " (not converged)" }
                );
            }
            Ok(())
        }
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            let out = output_dir(&cfg, &common);
            let (dataset, _) = io::run_simulate(&cfg, &out, cfg.sampler.seed)?;
            println!("simulated {} days into {}", dataset.n(), out.display());
            Ok(())
        }
        Command::Score { fit, truth } => {
            let report = io::run_recovery_score(&fit, &truth)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Diagnose { fit, out } => {
            let out = out.unwrap_or_else(|| fit.clone());
            let summary = io::run_diagnose(&fit, Path::new(&out))?;
            println!("DIC {:.2} (pD {:.2}); wrote {}", summary.dic.dic, summary.dic.pd, out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
