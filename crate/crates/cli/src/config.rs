use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::Value;
use stssl_core::losses::Mode;
use stssl_core::trainer::{flatten, parse_override, TrainConfig};

use crate::{usage, CliResult};

/// Flags shared by every command that builds a training configuration.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON configuration file; keys may be dotted (`model.head`) or nested.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

pub fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|_| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

fn read_config_file(path: &Path) -> CliResult<BTreeMap<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| crate::CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    if !value.is_object() {
        return usage(format!("config {} must be a JSON object", path.display()));
    }
    Ok(flatten(&value))
}

/// Defaults, then the config file, then `--set`, then the dedicated flags
/// in `flags`.
pub fn build_config(base: &TrainConfig, args: &ConfigArgs, flags: &[(&str, Option<Value>)]) -> CliResult<TrainConfig> {
    let mut layers = Vec::new();
    if let Some(p) = &args.config {
        layers.push(read_config_file(p)?);
    }
    let mut sets = BTreeMap::new();
    for s in &args.set {
        let (k, v) = parse_override(s).map_err(|e| crate::CliError::Usage(e.to_string()))?;
        sets.insert(k, v);
    }
    layers.push(sets);
    layers.push(
        flags
            .iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
            .collect(),
    );
    let mut cfg = base.clone();
    for layer in &layers {
        cfg = cfg
            .with_overrides(layer)
            .map_err(|e| crate::CliError::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| crate::CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    use anyhow::Context;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
