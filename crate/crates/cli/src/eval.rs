use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use stssl_core::dataio::{load_dataset, DatasetIndex, VideoStore};
use stssl_core::evalkit::{evaluate, VideoPrediction, DEFAULT_THRESHOLDS};
use stssl_core::trainer::{
    ground_truth, load_checkpoint, model_mismatch, predict_videos, Checkpoint, BEST_DIR, LAST_DIR, MANIFEST_FILE,
};

use crate::config::{build_config, write_json, ConfigArgs};
use crate::train::{print_report, RunInfo, RUN_FILE};
use crate::{usage, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Train,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long, conflicts_with = "predictions")]
    pub run: Option<PathBuf>,
    /// Checkpoint inside the run (`best` or `last`) or a checkpoint directory.
    #[arg(long, default_value = "best")]
    pub checkpoint: String,
    /// Score a JSON list of video predictions instead of a checkpoint.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Dataset directory; defaults to the one recorded in the run.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Report path; defaults to `<run>/report.json`, or `report.json` next
    /// to the prediction file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the predictions that were scored.
    #[arg(long)]
    pub dump_predictions: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

fn split_ids(index: &DatasetIndex, split: SplitArg) -> Vec<String> {
    match split {
        SplitArg::Val => index.val_ids.clone(),
        SplitArg::Train => index.train_ids(),
        SplitArg::All => index.annotations.keys().cloned().collect(),
    }
}

fn checkpoint_dir(run: &Path, which: &str) -> PathBuf {
    match which {
        "best" if run.join(BEST_DIR).join(MANIFEST_FILE).exists() => run.join(BEST_DIR),
        "best" | "last" => run.join(LAST_DIR),
        other => PathBuf::from(other),
    }
}

fn data_root(a: &EvalArgs, run: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(d) = &a.data {
        return Ok(d.clone());
    }
    let Some(run) = run else {
        return usage("--data is required with --predictions");
    };
    let p = run.join(RUN_FILE);
    let text = std::fs::read_to_string(&p).with_context(|| format!("no --data given and cannot read {}", p.display()))?;
    let info: RunInfo = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    Ok(info.data)
}

fn predict_from_checkpoint(a: &EvalArgs, ckpt: &Checkpoint, index: &DatasetIndex, ids: &[String]) -> CliResult<Vec<VideoPrediction>> {
    let manifest = &ckpt.manifest;
    let cfg = build_config(&manifest.config, &a.config, &[])?;
    let channels = index.videos.values().next().map_or(3, |v| v.channels);
    let model = cfg.model_config(index.class_count(), channels);
    if let Some((field, saved, now)) = model_mismatch(&manifest.model, &model) {
        return Err(anyhow!("checkpoint and configuration disagree on {field}: checkpoint has {saved}, configuration gives {now}").into());
    }
    let store = VideoStore::load(index, ids)?;
    Ok(predict_videos(index, &store, ids, &cfg, &manifest.model, &ckpt.params)?)
}

pub fn run(a: EvalArgs) -> CliResult<()> {
    let (preds, index, default_out) = match (&a.run, &a.predictions) {
        (Some(run), None) => {
            let dir = checkpoint_dir(run, &a.checkpoint);
            let ckpt = load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            let index = load_dataset(&data_root(&a, Some(run))?)?;
            let ids = split_ids(&index, a.split);
            if ids.is_empty() {
                return Err(anyhow!("the {:?} split of the dataset is empty", a.split).into());
            }
            let preds = predict_from_checkpoint(&a, &ckpt, &index, &ids)?;
            (preds, index, run.join("report.json"))
        }
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let preds: Vec<VideoPrediction> =
                serde_json::from_str(&text).with_context(|| format!("{} is not a prediction list", p.display()))?;
            let index = load_dataset(&data_root(&a, None)?)?;
            let out = p.with_file_name("report.json");
            (preds, index, out)
        }
        _ => return usage("pass exactly one of --run or --predictions"),
    };
    let ids: Vec<String> = preds.iter().map(|p| p.video_id.clone()).collect();
    if let Some(id) = ids.iter().find(|id| !index.annotations.contains_key(*id)) {
        return Err(anyhow!("prediction for unknown video {id:?}").into());
    }
    let gts = ground_truth(&index, &ids)?;
    let report = evaluate(&preds, &gts, &index.class_names, &DEFAULT_THRESHOLDS)?;
    let out = a.out.clone().unwrap_or(default_out);
    write_json(&out, &report)?;
    if let Some(p) = &a.dump_predictions {
        write_json(p, &preds)?;
    }
    println!("videos     {}", preds.len());
    print_report(&report);
    println!("report     {}", out.display());
    Ok(())
}
