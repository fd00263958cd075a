use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use stssl_core::dataio::{load_dataset, split_labeled};
use stssl_core::evalkit::MetricsReport;
use stssl_core::losses::Mode;
use stssl_core::trainer::{fit, FitOptions, TrainConfig};

use crate::config::{build_config, parse_mode, write_json, ConfigArgs};
use crate::train::{run_info, RUN_FILE};
use crate::{usage, CliResult};

pub const SWEEP_FILE: &str = "sweep.json";
pub const METRIC_KEYS: [&str; 4] = ["f_map@0.2", "v_map@0.2", "f_map@0.5", "v_map@0.5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    LabeledFraction,
    UnlabeledMultiple,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::LabeledFraction => "labeled_fraction",
            Axis::UnlabeledMultiple => "unlabeled_multiple",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::LabeledFraction => "labeled fraction",
            Axis::UnlabeledMultiple => "unlabeled videos (multiple of labeled)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stat {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub mode: Mode,
    pub axis: Axis,
    pub value: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub labeled: usize,
    pub unlabeled: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub mode: Mode,
    pub axis: Axis,
    pub value: f64,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub runs: Vec<SweepRun>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Sweep directory; every run gets its own subdirectory.
    #[arg(long)]
    pub out: PathBuf,
    /// Modes to compare; defaults to the configured mode.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<Mode>,
    /// Labeled fractions to sweep, e.g. `0.1,0.2,0.5`.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    /// Unlabeled amounts as multiples of the labeled count, e.g. `1,2,3,4`.
    #[arg(long, value_delimiter = ',')]
    pub unlabeled_multiples: Vec<f64>,
    /// Labeled fraction used by the unlabeled-amount sweep.
    #[arg(long, default_value_t = 0.2)]
    pub labeled_frac: f64,
    /// Seeds; every point is trained once per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone)]
struct Job {
    mode: Mode,
    axis: Axis,
    value: f64,
    seed: u64,
    config: TrainConfig,
    dir: PathBuf,
}

pub fn metric_values(report: &MetricsReport) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for thr in [0.2, 0.5] {
        m.insert(format!("f_map@{thr}"), report.f_map(thr).unwrap_or(0.0));
        m.insert(format!("v_map@{thr}"), report.v_map(thr).unwrap_or(0.0));
    }
    m
}

/// Groups runs by (mode, axis, value) in first-seen order.
pub fn summarize(runs: &[SweepRun]) -> Vec<SweepEntry> {
    let mut entries: Vec<SweepEntry> = Vec::new();
    let mut grouped: Vec<Vec<&SweepRun>> = Vec::new();
    for r in runs {
        let pos = entries
            .iter()
            .position(|e| e.mode == r.mode && e.axis == r.axis && e.value == r.value);
        let i = pos.unwrap_or_else(|| {
            entries.push(SweepEntry {
                mode: r.mode,
                axis: r.axis,
                value: r.value,
                seeds: Vec::new(),
                metrics: BTreeMap::new(),
            });
            grouped.push(Vec::new());
            entries.len() - 1
        });
        entries[i].seeds.push(r.seed);
        grouped[i].push(r);
    }
    for (e, rs) in entries.iter_mut().zip(&grouped) {
        for key in METRIC_KEYS {
            let vals: Vec<f64> = rs.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
            if !vals.is_empty() {
                e.metrics.insert(key.to_string(), Stat::of(&vals));
            }
        }
    }
    entries
}

fn point_dir(out: &Path, mode: Mode, axis: Axis, value: f64, seed: u64) -> PathBuf {
    out.join(mode.name()).join(format!("{}_{value}", axis.name())).join(format!("seed_{seed}"))
}

fn plan(a: &SweepArgs, base: &TrainConfig) -> CliResult<Vec<Job>> {
    if a.fractions.is_empty() && a.unlabeled_multiples.is_empty() {
        return usage("give --fractions and/or --unlabeled-multiples");
    }
    if a.seeds.is_empty() {
        return usage("give at least one seed");
    }
    if a.jobs == 0 {
        return usage("--jobs must be at least 1");
    }
    if a.unlabeled_multiples.iter().any(|m| !(*m >= 0.0)) {
        return usage("unlabeled multiples must be non-negative");
    }
    let index = load_dataset(&a.data)?;
    let modes = if a.modes.is_empty() { vec![base.mode] } else { a.modes.clone() };
    let mut jobs = Vec::new();
    for &mode in &modes {
        let points = a
            .fractions
            .iter()
            .map(|&f| (Axis::LabeledFraction, f))
            .chain(a.unlabeled_multiples.iter().map(|&m| (Axis::UnlabeledMultiple, m)));
        for (axis, value) in points {
            for &seed in &a.seeds {
                let mut config = TrainConfig {
                    mode,
                    seed,
                    ..base.clone()
                };
                match axis {
                    Axis::LabeledFraction => config.labeled_fraction = Some(value),
                    Axis::UnlabeledMultiple => {
                        config.labeled_fraction = Some(a.labeled_frac);
                        let split = split_labeled(&index, a.labeled_frac, seed)?;
                        config.unlabeled_limit = Some((value * split.labeled_ids.len() as f64).round() as usize);
                    }
                }
                config.validate().map_err(|e| crate::CliError::Usage(e.to_string()))?;
                let dir = point_dir(&a.out, mode, axis, value, seed);
                jobs.push(Job {
                    mode,
                    axis,
                    value,
                    seed,
                    config,
                    dir,
                });
            }
        }
    }
    Ok(jobs)
}

fn run_job(job: &Job, data: &Path, verbose: bool) -> anyhow::Result<SweepRun> {
    write_json(&job.dir.join(RUN_FILE), &run_info(data, job.seed))?;
    let opts = FitOptions {
        verbose,
        ..FitOptions::default()
    };
    let result = fit(&job.config, data, &job.dir, &opts).with_context(|| format!("run {}", job.dir.display()))?;
    let report = result
        .last_report
        .ok_or_else(|| anyhow!("run {} produced no validation report", job.dir.display()))?;
    write_json(&job.dir.join("report.json"), &report)?;
    let split = stssl_core::trainer::prepare_split(&job.config, data)?;
    Ok(SweepRun {
        mode: job.mode,
        axis: job.axis,
        value: job.value,
        seed: job.seed,
        dir: job.dir.clone(),
        labeled: split.labeled_ids.len(),
        unlabeled: split.unlabeled_ids.len(),
        metrics: metric_values(&report),
    })
}

pub fn run(a: SweepArgs) -> CliResult<()> {
    let base = build_config(
        &TrainConfig::default(),
        &a.config,
        &[("epochs", a.epochs.map(Value::from))],
    )?;
    let jobs = plan(&a, &base)?;
    let verbose = !a.quiet && a.jobs == 1;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<SweepRun>>>> = Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                if !a.quiet {
                    eprintln!("[{}/{}] {} {}={} seed {}", i + 1, jobs.len(), job.mode, job.axis.name(), job.value, job.seed);
                }
                let r = run_job(job, &a.data, verbose);
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = SweepReport {
        entries: summarize(&runs),
        runs,
    };
    let path = a.out.join(SWEEP_FILE);
    write_json(&path, &report)?;
    println!("{:<11}{:<20}{:>8}{:>6}  {:<18}{:<18}", "mode", "axis", "value", "runs", "f-mAP@0.5", "v-mAP@0.5");
    for e in &report.entries {
        let cell = |k: &str| e.metrics.get(k).map_or("-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        println!(
            "{:<11}{:<20}{:>8}{:>6}  {:<18}{:<18}",
            e.mode.name(),
            e.axis.name(),
            e.value,
            e.seeds.len(),
            cell("f_map@0.5"),
            cell("v_map@0.5")
        );
    }
    println!("report     {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: Mode, value: f64, seed: u64, f: f64) -> SweepRun {
        SweepRun {
            mode,
            axis: Axis::LabeledFraction,
            value,
            seed,
            dir: PathBuf::new(),
            labeled: 1,
            unlabeled: 1,
            metrics: [("f_map@0.5".to_string(), f)].into_iter().collect(),
        }
    }

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.min, s.max), (2.0, 1.0, 3.0));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(Stat::of(&[0.5]).std, 0.0);
    }

    #[test]
    fn summarize_groups_by_point() {
        let runs = vec![
            run(Mode::SemiVar, 0.1, 0, 0.2),
            run(Mode::SemiVar, 0.1, 1, 0.4),
            run(Mode::SemiVar, 0.2, 0, 0.5),
            run(Mode::Supervised, 0.1, 0, 0.1),
        ];
        let e = summarize(&runs);
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].seeds, vec![0, 1]);
        assert!((e[0].metrics["f_map@0.5"].mean - 0.3).abs() < 1e-12);
        assert_eq!(e[2].mode, Mode::Supervised);
    }
}
