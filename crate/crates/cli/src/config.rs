//! Experiment configuration.
//!
//! The format is line oriented:
//!
//! ```text
//! # comment
//! name = mnist-asym-0.6
//! seed = 1
//! noise.kind = asymmetric
//! noise.p = 0.6
//! ```
//!
//! Keys are dotted `section.field` paths, values are plain text. Later lines
//! override earlier ones, which is how `--set` overrides and presets compose.
//! Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use twostage::data::AugmentationSpec;
use twostage::mining::MiningConfig;
use twostage::nn::{Algorithm, MlpSpec, OptimizerConfig};
use twostage::noise::{NoiseKind, NoiseSpec, CIFAR10_PAIRS, MNIST_PAIRS};
use twostage::ssl::{AlphaSchedule, SslConfig};
use twostage::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Environment variable naming the directory that holds dataset files.
pub const DATA_DIR_ENV: &str = "TWOSTAGE_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// `train-images-idx3-ubyte[.gz]` and friends inside `dir`.
    Mnist { dir: PathBuf },
    /// CIFAR-10 binary batches inside `dir`.
    Cifar10 { dir: PathBuf },
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        separation: f64,
    },
}

impl DatasetSpec {
    pub fn family(&self) -> &'static str {
        match self {
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::Cifar10 { .. } => "cifar10",
            DatasetSpec::Synthetic { .. } => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Outside the validated desk-scale presets.
    pub extended: bool,
    pub dataset: DatasetSpec,
    /// Keep only the first `n` training examples (after shuffling by seed).
    pub train_limit: Option<usize>,
    pub noise: NoiseSpec,
    pub val_fraction: f64,
    pub net: MlpSpec,
    pub baseline: TrainConfig,
    pub mining: MiningConfig,
    pub clean_set: Option<PathBuf>,
    pub ssl: SslConfig,
}

impl ExperimentConfig {
    /// Label used for report columns, e.g. `asy.p = 0.6`.
    pub fn noise_column(&self) -> String {
        noise_column(&self.noise)
    }
}

pub fn noise_column(noise: &NoiseSpec) -> String {
    if noise.p == 0.0 {
        return "p = 0".into();
    }
    match noise.kind {
        NoiseKind::Symmetric => format!("sy.p = {}", noise.p),
        NoiseKind::Asymmetric => format!("asy.p = {}", noise.p),
    }
}

/// Raw `key = value` entries with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut raw = RawConfig::default();
        raw.merge_text(text)?;
        Ok(raw)
    }

    pub fn merge_text(&mut self, text: &str) -> CliResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(CliError::Config(format!("line {}: bad key '{key}'", n + 1)));
            }
            self.entries.insert(key.to_string(), (value.trim().to_string(), n + 1));
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn set(&mut self, assignment: &str) -> CliResult<()> {
        if !assignment.contains('=') {
            return Err(CliError::Config(format!("override '{assignment}' is not key=value")));
        }
        self.merge_text(assignment)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Typed reads from a [`RawConfig`] that remember which keys were used.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: Vec<String>,
}

impl<'a> Reader<'a> {
    fn str(&mut self, key: &str) -> Option<&'a str> {
        self.used.push(key.to_string());
        self.raw.get(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        let line = self.raw.entries.get(key).map(|(_, l)| *l).unwrap_or(0);
        match self.str(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("line {line}: {key} = {v}: {e}"))),
        }
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn optimizer(&mut self, section: &str, base: OptimizerConfig) -> CliResult<OptimizerConfig> {
        let algorithm: Algorithm = match self.str(&format!("{section}.optimizer")) {
            Some(s) => s.parse().map_err(|e| CliError::Config(format!("{section}.optimizer: {e}")))?,
            None => base.algorithm,
        };
        let config = OptimizerConfig {
            algorithm,
            learning_rate: self.or(&format!("{section}.learning_rate"), base.learning_rate)?,
            momentum: self.or(&format!("{section}.momentum"), base.momentum)?,
            min_learning_rate: self.or(&format!("{section}.min_learning_rate"), base.min_learning_rate)?,
            patience: self.or(&format!("{section}.patience"), base.patience)?,
            stop_patience: self.or(&format!("{section}.stop_patience"), base.stop_patience)?,
            decay: self.or(&format!("{section}.decay"), base.decay)?,
        };
        config.validate()?;
        Ok(config)
    }
}

fn parse_list(key: &str, value: &str) -> CliResult<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::Config(format!("{key}: '{s}': {e}")))
        })
        .collect()
}

fn parse_pairs(value: &str) -> CliResult<Vec<(usize, usize)>> {
    match value {
        "mnist" => Ok(MNIST_PAIRS.to_vec()),
        "cifar10" => Ok(CIFAR10_PAIRS.to_vec()),
        "" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|pair| {
                let (a, b) = pair
                    .split_once('>')
                    .ok_or_else(|| CliError::Config(format!("noise.pairs: '{pair}' is not A>B")))?;
                let parse = |s: &str| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| CliError::Config(format!("noise.pairs: '{pair}': {e}")))
                };
                Ok((parse(a)?, parse(b)?))
            })
            .collect(),
    }
}

fn default_data_dir(family: &str) -> PathBuf {
    let base = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
    base.join(family)
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> CliResult<Self> {
        let mut r = Reader { raw, used: Vec::new() };
        let seed: u64 = r
            .parse("seed")?
            .ok_or_else(|| CliError::Config("`seed` is mandatory".into()))?;
        let name = r.str("name").unwrap_or("custom").to_string();
        let output_dir = PathBuf::from(r.str("output_dir").unwrap_or("runs").to_string()).join(format!("{name}-seed{seed}"));
        let output_dir = match r.str("output_path") {
            Some(p) => PathBuf::from(p),
            None => output_dir,
        };
        let extended = r.or("extended", false)?;

        let kind = r.str("dataset.kind").unwrap_or("mnist").to_string();
        let dataset = match kind.as_str() {
            "mnist" | "cifar10" => {
                let dir = r
                    .str("dataset.dir")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| default_data_dir(&kind));
                if !dir.is_dir() {
                    return Err(CliError::Config(format!(
                        "dataset directory {} does not exist (set dataset.dir or {DATA_DIR_ENV})",
                        dir.display()
                    )));
                }
                if kind == "mnist" {
                    DatasetSpec::Mnist { dir }
                } else {
                    DatasetSpec::Cifar10 { dir }
                }
            }
            "synthetic" => DatasetSpec::Synthetic {
                classes: r.or("dataset.classes", 4)?,
                per_class: r.or("dataset.per_class", 200)?,
                test_per_class: r.or("dataset.test_per_class", 100)?,
                dim: r.or("dataset.dim", 16)?,
                separation: r.or("dataset.separation", 4.0)?,
            },
            other => return Err(CliError::Config(format!("unknown dataset.kind '{other}'"))),
        };
        let train_limit = r.parse("dataset.train_limit")?;

        let p: f64 = r.or("noise.p", 0.0)?;
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Config(format!("noise.p = {p} outside [0, 1]")));
        }
        let noise = match r.str("noise.kind").unwrap_or("none") {
            "none" | "clean" => NoiseSpec::clean(),
            "symmetric" => NoiseSpec::symmetric(p),
            "asymmetric" => NoiseSpec {
                kind: NoiseKind::Asymmetric,
                p,
                pairs: parse_pairs(r.str("noise.pairs").unwrap_or(dataset.family()))?,
            },
            other => return Err(CliError::Config(format!("unknown noise.kind '{other}'"))),
        };
        let val_fraction: f64 = r.or("split.val_fraction", 0.1)?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(CliError::Config(format!("split.val_fraction = {val_fraction} outside (0, 1)")));
        }

        let hidden = match r.str("net.hidden") {
            Some(v) => parse_list("net.hidden", v)?,
            None => vec![128, 128],
        };
        let net = MlpSpec {
            inputs: 0,
            hidden,
            classes: 0,
            dropout_keep: r.or("net.dropout_keep", 0.5)?,
            input_noise: r.or("net.input_noise", 0.15)?,
        };

        let augmentation = AugmentationSpec {
            horizontal_flip: r.or("augment.flip", false)?,
            shift_pixels: r.or("augment.shift", 0)?,
            gaussian_stddev: r.or("augment.stddev", 0.0)?,
            image_shape: None,
        };

        let baseline = TrainConfig {
            epochs: r.or("baseline.epochs", 40)?,
            batch_size: r.or("baseline.batch_size", 100)?,
            optimizer: r.optimizer("baseline", OptimizerConfig::default())?,
            balance_classes: false,
            augmentation,
            seed,
        };

        let mining = MiningConfig {
            confidence_threshold: r.or("mining.threshold", 0.9)?,
            floor_fraction: r.or("mining.floor", 0.10)?,
        };
        mining.validate()?;
        let clean_set = r.str("mining.clean_set").map(PathBuf::from);

        let schedule = match r.str("ssl.schedule").unwrap_or("fixed") {
            "fixed" => AlphaSchedule::Fixed,
            "ramp" => AlphaSchedule::Ramp {
                ramp_up: r.or("ssl.ramp_up", 10)?,
                ramp_down_start: r.parse("ssl.ramp_down_start")?,
            },
            other => return Err(CliError::Config(format!("unknown ssl.schedule '{other}'"))),
        };
        let ssl = SslConfig {
            batch_size: r.or("ssl.batch_size", 100)?,
            alpha: r.or("ssl.alpha", 1.0)?,
            schedule,
            sub_epochs: r.or("ssl.sub_epochs", 100)?,
            temporal_ensembling: r.or("ssl.temporal_ensembling", false)?,
            ema_decay: r.or("ssl.ema_decay", 0.6)?,
            augmentation,
            input_noise: r.or("ssl.input_noise", net.input_noise)?,
            dropout_keep: r.parse("ssl.dropout_keep")?,
            optimizer: r.optimizer("ssl", baseline.optimizer.clone())?,
            seed,
            dump_dir: None,
        };
        ssl.validate()?;

        let unknown: Vec<&str> = raw.keys().filter(|k| !r.used.iter().any(|u| u == k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        Ok(ExperimentConfig {
            name,
            seed,
            output_dir,
            extended,
            dataset,
            train_limit,
            noise,
            val_fraction,
            net,
            baseline,
            mining,
            clean_set,
            ssl,
        })
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut raw = RawConfig::parse(&text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(extra: &str) -> CliResult<ExperimentConfig> {
        let mut raw = RawConfig::parse("seed = 3\ndataset.kind = synthetic\n").unwrap();
        raw.merge_text(extra)?;
        ExperimentConfig::from_raw(&raw)
    }

    #[test]
    fn later_lines_win() {
        let raw = RawConfig::parse("a.b = 1\n# note\n\na.b = 2  # trailing\n").unwrap();
        assert_eq!(raw.get("a.b"), Some("2"));
    }

    #[test]
    fn seed_is_mandatory() {
        let raw = RawConfig::parse("dataset.kind = synthetic").unwrap();
        assert!(matches!(ExperimentConfig::from_raw(&raw), Err(CliError::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = synthetic("ssl.alpah = 2").unwrap_err();
        assert!(err.to_string().contains("ssl.alpah"), "{err}");
    }

    #[test]
    fn sections_reach_their_structs() {
        let c = synthetic(
            "noise.kind = asymmetric\nnoise.p = 0.6\nnoise.pairs = 0>1,2>3\nssl.alpha = 2.5\n\
             ssl.schedule = ramp\nssl.ramp_up = 5\nbaseline.optimizer = adam\nbaseline.learning_rate = 0.001\n\
             net.hidden = 32\nmining.floor = 0.2",
        )
        .unwrap();
        assert_eq!(c.noise.pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(c.ssl.alpha, 2.5);
        assert_eq!(c.ssl.schedule, AlphaSchedule::Ramp { ramp_up: 5, ramp_down_start: None });
        assert_eq!(c.baseline.optimizer.algorithm, Algorithm::Adam);
        assert_eq!(c.ssl.optimizer.learning_rate, 0.001);
        assert_eq!(c.net.hidden, vec![32]);
        assert_eq!(c.mining.floor_fraction, 0.2);
        assert_eq!(c.noise_column(), "asy.p = 0.6");
    }

    #[test]
    fn bad_values_name_the_line() {
        let err = synthetic("ssl.alpha = lots").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(synthetic("ssl.batch_size = 7").is_err());
        assert!(synthetic("noise.p = 1.5").is_err());
    }

    #[test]
    fn missing_dataset_dir_is_a_config_error() {
        let raw = RawConfig::parse("seed = 1\ndataset.dir = /definitely/not/here").unwrap();
        assert!(matches!(ExperimentConfig::from_raw(&raw), Err(CliError::Config(_))));
    }
}
