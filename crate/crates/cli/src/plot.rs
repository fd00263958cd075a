use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use plotters::prelude::*;
use stssl_core::losses::Mode;

use crate::sweep::{Axis, SweepReport, METRIC_KEYS};
use crate::{usage, CliResult};

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Sweep reports (`sweep.json`) to draw.
    #[arg(required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Output directory for the SVG files.
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
    /// Metrics to draw, one figure per metric and sweep axis.
    #[arg(long, value_delimiter = ',', default_value = "f_map@0.5,v_map@0.5")]
    pub metrics: Vec<String>,
}

/// (value, mean, std) points of one mode.
type Series = BTreeMap<Mode, Vec<(f64, f64, f64)>>;

fn load_report(path: &Path) -> anyhow::Result<SweepReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed report {}", path.display()))
}

fn collect(reports: &[SweepReport], axis: Axis, metric: &str) -> Series {
    let mut series = Series::new();
    for r in reports {
        for e in r.entries.iter().filter(|e| e.axis == axis) {
            if let Some(s) = e.metrics.get(metric) {
                series.entry(e.mode).or_default().push((e.value, s.mean, s.std));
            }
        }
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

pub fn draw(path: &Path, axis: Axis, metric: &str, series: &Series) -> anyhow::Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    let xs = series.values().flatten().map(|p| p.0);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let pad = if x1 > x0 { 0.05 * (x1 - x0) } else { 0.5 };
    let y1 = series
        .values()
        .flatten()
        .map(|p| p.1 + p.2)
        .fold(0.0f64, f64::max)
        .max(0.05)
        * 1.1;

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} vs {}", axis.label()), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(axis.label())
        .y_desc(metric)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (mode, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(mode.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|p| Circle::new((p.0, p.1), 3, color.filled())))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(
                pts.iter()
                    .filter(|p| p.2 > 0.0)
                    .map(|p| PathElement::new(vec![(p.0, p.1 - p.2), (p.0, p.1 + p.2)], color)),
            )
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

pub fn run(a: PlotArgs) -> CliResult<()> {
    for m in &a.metrics {
        if !METRIC_KEYS.contains(&m.as_str()) {
            return usage(format!("unknown metric {m:?}; expected one of {}", METRIC_KEYS.join(", ")));
        }
    }
    let reports = a.reports.iter().map(|p| load_report(p)).collect::<anyhow::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut written = 0;
    for axis in [Axis::LabeledFraction, Axis::UnlabeledMultiple] {
        for metric in &a.metrics {
            let series = collect(&reports, axis, metric);
            if series.is_empty() {
                continue;
            }
            let path = a.out.join(format!("{}_{}.svg", axis.name(), metric.replace('@', "_")));
            draw(&path, axis, metric, &series)?;
            println!("{}  ({} series)", path.display(), series.len());
            written += 1;
        }
    }
    if written == 0 {
        return Err(anyhow!("the reports contain no sweep entries to plot").into());
    }
    Ok(())
}
