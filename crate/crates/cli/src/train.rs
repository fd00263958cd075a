use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stssl_core::evalkit::MetricsReport;
use stssl_core::losses::Mode;
use stssl_core::trainer::{deterministic_from_env, fit, FitOptions, TrainConfig};

use crate::config::{build_config, parse_mode, write_json, ConfigArgs};
use crate::CliResult;

pub const RUN_FILE: &str = "run.json";

/// What a run directory needs beyond its config snapshot to be rerun.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub data: PathBuf,
    pub seed: u64,
    pub code_version: String,
    pub deterministic: bool,
    pub argv: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory; defaults to `runs/<mode>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Fraction of the training videos that keep their labels.
    #[arg(long)]
    pub labeled_frac: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Allow resuming under a changed (non-model) configuration.
    #[arg(long)]
    pub allow_config_change: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

pub fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    build_config(
        &TrainConfig::default(),
        &a.config,
        &[
            ("mode", a.mode.map(|m| Value::from(m.name()))),
            ("labeled_fraction", a.labeled_frac.map(Value::from)),
            ("epochs", a.epochs.map(Value::from)),
            ("seed", a.seed.map(Value::from)),
        ],
    )
}

pub fn run_info(data: &Path, seed: u64) -> RunInfo {
    RunInfo {
        data: data.to_path_buf(),
        seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        deterministic: deterministic_from_env(),
        argv: std::env::args().collect(),
    }
}

pub fn print_report(report: &MetricsReport) {
    println!("{:<8}{:>10}{:>10}", "metric", "iou=0.2", "iou=0.5");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    println!("{:<8}{:>10}{:>10}", "f-mAP", cell(report.f_map(0.2)), cell(report.f_map(0.5)));
    println!("{:<8}{:>10}{:>10}", "v-mAP", cell(report.v_map(0.2)), cell(report.v_map(0.5)));
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-s{}", cfg.mode, cfg.seed)));
    write_json(&out.join(RUN_FILE), &run_info(&a.data, cfg.seed))?;
    let opts = FitOptions {
        resume: a.resume,
        allow_config_change: a.allow_config_change,
        stop_after: None,
        verbose: !a.quiet,
    };
    let result = fit(&cfg, &a.data, &out, &opts)?;
    println!("run        {}", out.display());
    println!("mode       {}", cfg.mode);
    println!("epochs     {}", result.epochs_completed);
    if let Some(report) = &result.last_report {
        print_report(report);
    }
    Ok(())
}
