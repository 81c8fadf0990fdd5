use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use twostage_cli::pipeline::{self, OutputLock, Summary};
use twostage_cli::{build_report, resolve_config, CliError, CliResult, ExperimentConfig, ReferenceBands, DATA_DIR_ENV};

#[derive(Parser)]
#[command(name = "twostage", version, about = "Two-stage training on noisy labels: mine a clean subset, then train semi-supervised")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Built-in configuration (mnist-clean, mnist-sym-0.2, mnist-asym-0.2, mnist-asym-0.6, ...).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Configuration file in `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ssl.alpha=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<name>-seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root holding mnist/ and cifar10/; overrides TWOSTAGE_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("output_path={}", out.display()));
        }
        if let Some(dir) = &self.data_dir {
            std::env::set_var(DATA_DIR_ENV, dir);
        }
        resolve_config(self.preset.as_deref(), self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt the training labels and write the noise audit and split.
    InjectNoise(ConfigArgs),
    /// Train the cross-entropy baseline on the noisy labels.
    TrainBaseline {
        #[command(flatten)]
        args: ConfigArgs,
        /// Class balancing plus a refined validation set.
        #[arg(long)]
        improved: bool,
    },
    /// Stage 1: split the training set into labeled seeds and an unlabeled pool.
    Mine {
        #[command(flatten)]
        args: ConfigArgs,
        /// Trusted clean set (CSV: label,true_label,f0..) for binary-filter mining.
        #[arg(long)]
        clean_set: Option<PathBuf>,
    },
    /// Stage 2: semi-supervised training from the mined split.
    TrainSsl(ConfigArgs),
    /// Accuracy and confusion matrix of a checkpoint on the test set.
    Evaluate {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Every stage end to end.
    Run(ConfigArgs),
    /// Compare summary.json files against the reference bands.
    Report {
        summaries: Vec<PathBuf>,
        /// Also write the grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Alternative bands file.
        #[arg(long)]
        bands: Option<PathBuf>,
    },
}

fn staged<F>(args: &ConfigArgs, f: F) -> CliResult<()>
where
    F: FnOnce(&pipeline::Prepared, &std::path::Path) -> CliResult<()>,
{
    let config = args.resolve()?;
    let _lock = OutputLock::acquire(&config.output_dir)?;
    let prep = pipeline::prepare(&config)?;
    f(&prep, &config.output_dir)
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::InjectNoise(args) => staged(&args, |prep, out| {
            pipeline::inject_noise(prep, out)?;
            print_json(&prep.noise_audit)
        }),
        Command::TrainBaseline { args, improved } => staged(&args, |prep, out| {
            let (_, metrics) = pipeline::run_baseline(prep, improved, out)?;
            print_json(&metrics)
        }),
        Command::Mine { args, clean_set } => staged(&args, |prep, out| {
            let outcome = pipeline::run_mining(prep, out, clean_set.as_deref())?;
            print_json(&outcome.report)
        }),
        Command::TrainSsl(args) => staged(&args, |prep, out| {
            let (_, metrics) = pipeline::run_ssl(prep, out)?;
            print_json(&metrics)
        }),
        Command::Evaluate { args, checkpoint } => {
            let prep = pipeline::prepare(&args.resolve()?)?;
            print_json(&pipeline::evaluate_checkpoint(&prep, &checkpoint)?)
        }
        Command::Run(args) => {
            let summary = pipeline::run_pipeline(&args.resolve()?)?;
            print_json(&summary)
        }
        Command::Report { summaries, csv, bands } => {
            let bands = match bands {
                Some(path) => serde_json::from_str(
                    &std::fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
                )?,
                None => ReferenceBands::builtin(),
            };
            let loaded = summaries.iter().map(|p| Summary::load(p)).collect::<CliResult<Vec<_>>>()?;
            let report = build_report(&loaded, &bands)?;
            print!("{}", report.to_text());
            if let Some(path) = csv {
                std::fs::write(path, report.to_csv())?;
            }
            match report.flags() {
                0 => Ok(()),
                n => Err(CliError::Flagged(format!("{n} cell(s) outside their bands"))),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            e.exit_code()
        }
    }
}
