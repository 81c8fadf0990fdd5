//! Built-in experiment configurations.

use crate::config::RawConfig;
use crate::error::{CliError, CliResult};

pub const PRESETS: &[(&str, &str)] = &[
    ("mnist-clean", include_str!("../presets/mnist-clean.conf")),
    ("mnist-sym-0.2", include_str!("../presets/mnist-sym-0.2.conf")),
    ("mnist-asym-0.2", include_str!("../presets/mnist-asym-0.2.conf")),
    ("mnist-asym-0.6", include_str!("../presets/mnist-asym-0.6.conf")),
    ("synthetic-smoke", include_str!("../presets/synthetic-smoke.conf")),
    ("cifar10-sym-0.2", include_str!("../presets/cifar10-sym-0.2.conf")),
    ("cifar10-asym-0.6", include_str!("../presets/cifar10-asym-0.6.conf")),
];

pub fn preset_text(name: &str) -> CliResult<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown preset '{name}' (known: {})", known.join(", ")))
        })
}

pub fn preset(name: &str) -> CliResult<RawConfig> {
    RawConfig::parse(preset_text(name)?)
}
