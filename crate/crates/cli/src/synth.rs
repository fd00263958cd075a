use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use stssl_core::dataio::{generate_synthetic_dataset, AnnotationMode, SynthConfig};

use crate::{usage, CliError, CliResult};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnnotationArg {
    Box,
    Mask,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 250)]
    pub videos: usize,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Frame size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of videos with action-free frames.
    #[arg(long, default_value_t = 0.0)]
    pub untrimmed_frac: f64,
    /// Fraction held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 3)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0.04)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = AnnotationArg::Box)]
    pub annotation: AnnotationArg,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("size {s:?} is not HEIGHTxWIDTH"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

pub fn run(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        num_videos: a.videos,
        classes: a.classes,
        frames_per_video: a.frames,
        height: a.size.0,
        width: a.size.1,
        untrimmed_fraction: a.untrimmed_frac,
        seed: a.seed,
        val_fraction: a.val_frac,
        annotation_mode: match a.annotation {
            AnnotationArg::Box => AnnotationMode::Box,
            AnnotationArg::Mask => AnnotationMode::Mask,
        },
        distractors: a.distractors,
        noise: a.noise,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .with_context(|| format!("reading {}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return usage(format!(
                "{} is not empty; pass --force to replace it",
                a.out.display()
            ));
        }
        if non_empty {
            std::fs::remove_dir_all(&a.out).with_context(|| format!("removing {}", a.out.display()))?;
        }
    }
    let index = generate_synthetic_dataset(&a.out, &cfg)?;
    let untrimmed = index.annotations.values().filter(|v| !v.trimmed).count();
    let total = index.annotations.len();
    println!("dataset    {}", a.out.display());
    println!("videos     {total}");
    println!("classes    {} ({})", index.class_count(), index.class_names.join(", "));
    println!("trimmed    {}", total - untrimmed);
    println!("untrimmed  {untrimmed}");
    println!("train/val  {}/{}", index.train_ids().len(), index.val_ids.len());
    Ok(())
}
