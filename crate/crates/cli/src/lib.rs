//! Experiment harness: configuration, presets, the end-to-end pipeline and
//! reports against reference accuracy bands.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod presets;
pub mod report;

pub use config::{ExperimentConfig, RawConfig, DATA_DIR_ENV};
pub use error::{CliError, CliResult};
pub use pipeline::{prepare, run_pipeline, Prepared, Summary};
pub use report::{build_report, Report, ReferenceBands};

/// Resolves `--preset` / `--config` plus `--set` overrides into a config.
pub fn resolve_config(
    preset: Option<&str>,
    config: Option<&std::path::Path>,
    overrides: &[String],
) -> CliResult<ExperimentConfig> {
    let mut raw = match (preset, config) {
        (Some(name), None) => presets::preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RawConfig::parse(&text)?
        }
        (None, None) => presets::preset("mnist-clean")?,
        (Some(_), Some(_)) => return Err(CliError::Config("give --preset or --config, not both".into())),
    };
    for o in overrides {
        raw.set(o)?;
    }
    ExperimentConfig::from_raw(&raw)
}
