//! Detection metrics: turning localization maps into detections and tubes,
//! box and mask IoU, tube IoU, all-point average precision, f-mAP and v-mAP.

mod ap;

pub use ap::{ap_from_ranked, average_precision, greedy_match, rank_order};

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::AnnotationMode;
use crate::geometry::{BoxRegion, Region};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.2, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub frame_index: usize,
    pub class_id: usize,
    pub score: f64,
    pub region: Region,
}

/// One scored detection per video over the frames it covers. The span runs
/// from the first to the last key of `regions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub video_id: String,
    pub class_id: usize,
    pub score: f64,
    pub regions: BTreeMap<usize, Region>,
}

impl Tube {
    pub fn span(&self) -> Option<(usize, usize)> {
        Some((*self.regions.keys().next()?, *self.regions.keys().next_back()?))
    }
}

/// Ground truth of one video: its class and annotated frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub class_id: usize,
    pub regions: BTreeMap<usize, Region>,
}

impl GroundTruth {
    pub fn tube(&self) -> Tube {
        Tube {
            video_id: self.video_id.clone(),
            class_id: self.class_id,
            score: 1.0,
            regions: self.regions.clone(),
        }
    }
}

/// Model output for one whole video on its original grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub detections: Vec<Detection>,
    pub tube: Option<Tube>,
}

/// Largest 4-connected component of a binary map. Ties go to the component
/// found first in row-major order.
pub fn largest_component(binary: ArrayView2<'_, bool>) -> Option<Array2<bool>> {
    let (h, w) = binary.dim();
    let mut label = Array2::<u32>::zeros((h, w));
    let mut best: Option<(usize, u32)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !binary[[y, x]] || label[[y, x]] != 0 {
                continue;
            }
            next += 1;
            label[[y, x]] = next;
            stack.push((y, x));
            let mut size = 0;
            while let Some((cy, cx)) = stack.pop() {
                size += 1;
                let mut visit = |ny: usize, nx: usize| {
                    if binary[[ny, nx]] && label[[ny, nx]] == 0 {
                        label[[ny, nx]] = next;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    visit(cy - 1, cx);
                }
                if cy + 1 < h {
                    visit(cy + 1, cx);
                }
                if cx > 0 {
                    visit(cy, cx - 1);
                }
                if cx + 1 < w {
                    visit(cy, cx + 1);
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, next));
            }
        }
    }
    best.map(|(_, id)| label.mapv(|l| l == id))
}

/// Per-frame detections and the video tube for a localization map `[T, H, W]`
/// whose frame `t` is the video's frame `t`.
pub fn map_to_detections(
    video_id: &str,
    loc: &Array3<f64>,
    class_scores: &[f64],
    threshold: f64,
    mode: AnnotationMode,
) -> (Vec<Detection>, Option<Tube>) {
    let (class_id, score) = class_scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bs), (i, &s)| if s > bs { (i, s) } else { (bi, bs) });
    let score = if score.is_finite() { score.clamp(0.0, 1.0) } else { 0.0 };
    let mut detections = Vec::new();
    let mut regions = BTreeMap::new();
    for (t, frame) in loc.outer_iter().enumerate() {
        let binary = frame.mapv(|v| v >= threshold);
        let Some(component) = largest_component(binary.view()) else {
            continue;
        };
        let region = match mode {
            AnnotationMode::Box => Region::Box(BoxRegion::from_mask(&component).expect("non-empty component")),
            AnnotationMode::Mask => Region::Mask(component),
        };
        regions.insert(t, region.clone());
        detections.push(Detection {
            video_id: video_id.to_string(),
            frame_index: t,
            class_id,
            score,
            region,
        });
    }
    let tube = (!regions.is_empty()).then(|| Tube {
        video_id: video_id.to_string(),
        class_id,
        score,
        regions,
    });
    (detections, tube)
}

/// Intersection over union; two empty regions give 0.
pub fn iou(a: &Region, b: &Region) -> Result<f64> {
    match (a, b) {
        (Region::Box(a), Region::Box(b)) => {
            let inter = BoxRegion::new(a.x1.max(b.x1), a.y1.max(b.y1), a.x2.min(b.x2), a.y2.min(b.y2)).area();
            let union = a.area() + b.area() - inter;
            Ok(if union > 0.0 { inter / union } else { 0.0 })
        }
        (Region::Mask(a), Region::Mask(b)) => {
            if a.dim() != b.dim() {
                return Err(Error::Shape(format!("mask IoU of {:?} and {:?} masks", a.dim(), b.dim())));
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &q) in a.iter().zip(b.iter()) {
                inter += (p && q) as usize;
                union += (p || q) as usize;
            }
            Ok(if union > 0 { inter as f64 / union as f64 } else { 0.0 })
        }
        _ => Err(Error::InvalidArgument("IoU between a box and a mask".into())),
    }
}

/// Temporal IoU of the spans times the mean spatial IoU over the frames of
/// the temporal intersection. A frame inside the intersection that lacks a
/// region in either tube contributes zero.
pub fn tube_iou(a: &Tube, b: &Tube) -> Result<f64> {
    let (Some((a0, a1)), Some((b0, b1))) = (a.span(), b.span()) else {
        return Ok(0.0);
    };
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo > hi {
        return Ok(0.0);
    }
    let inter = (hi - lo + 1) as f64;
    let union = (a1.max(b1) - a0.min(b0) + 1) as f64;
    let mut spatial = 0.0;
    for f in lo..=hi {
        if let (Some(ra), Some(rb)) = (a.regions.get(&f), b.regions.get(&f)) {
            spatial += iou(ra, rb)?;
        }
    }
    Ok(inter / union * spatial / inter)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

impl MatchCounts {
    fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.missed += other.missed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub frame_ap: f64,
    pub video_ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub f_map: f64,
    pub v_map: f64,
    pub per_class: BTreeMap<String, ClassAp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelCounts {
    pub frame: MatchCounts,
    pub video: MatchCounts,
}

/// Metrics keyed by `iou_<threshold>` plus match counts under the same keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: BTreeMap<String, LevelCounts>,
    #[serde(flatten)]
    pub levels: BTreeMap<String, LevelReport>,
}

pub fn level_key(threshold: f64) -> String {
    format!("iou_{threshold}")
}

impl MetricsReport {
    pub fn level(&self, threshold: f64) -> Option<&LevelReport> {
        self.levels.get(&level_key(threshold))
    }

    pub fn f_map(&self, threshold: f64) -> Option<f64> {
        self.level(threshold).map(|l| l.f_map)
    }

    pub fn v_map(&self, threshold: f64) -> Option<f64> {
        self.level(threshold).map(|l| l.v_map)
    }
}

/// Per-class AP and counts for one threshold.
pub struct ClassMetrics {
    pub ap: BTreeMap<usize, f64>,
    pub counts: MatchCounts,
}

fn check_class(class_id: usize, num_classes: usize, what: &str) -> Result<()> {
    if class_id >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "{what} has class id {class_id} outside the {num_classes}-class taxonomy"
        )));
    }
    Ok(())
}

fn check_inputs(preds: &[VideoPrediction], gts: &[GroundTruth], num_classes: usize) -> Result<()> {
    for g in gts {
        check_class(g.class_id, num_classes, &format!("ground truth for {}", g.video_id))?;
    }
    for p in preds {
        for d in &p.detections {
            check_class(d.class_id, num_classes, &format!("detection in {}", d.video_id))?;
        }
        if let Some(t) = &p.tube {
            check_class(t.class_id, num_classes, &format!("tube in {}", t.video_id))?;
        }
    }
    Ok(())
}

/// One AP computation per class present in the ground truth.
fn per_class<D, G>(
    num_classes: usize,
    dets: &[(usize, f64, D)],
    gts: &[(usize, G)],
    threshold: f64,
    overlap: impl Fn(&D, &G) -> Result<Option<f64>>,
) -> Result<ClassMetrics> {
    let mut ap = BTreeMap::new();
    let mut counts = MatchCounts::default();
    for c in 0..num_classes {
        let g: Vec<&G> = gts.iter().filter(|(k, _)| *k == c).map(|(_, g)| g).collect();
        if g.is_empty() {
            continue;
        }
        let d: Vec<&(usize, f64, D)> = dets.iter().filter(|(k, _, _)| *k == c).collect();
        let mut ious = Array2::<f64>::from_elem((d.len(), g.len()), f64::NEG_INFINITY);
        for (i, (_, _, det)) in d.iter().enumerate() {
            for (j, gt) in g.iter().enumerate() {
                if let Some(v) = overlap(det, gt)? {
                    ious[[i, j]] = v;
                }
            }
        }
        let scores: Vec<f64> = d.iter().map(|(_, s, _)| *s).collect();
        let matches = greedy_match(&scores, &ious, threshold);
        let tp = matches.iter().filter(|m| m.is_some()).count();
        counts.add(MatchCounts {
            tp,
            fp: d.len() - tp,
            missed: g.len() - tp,
        });
        ap.insert(c, average_precision(&scores, &ious, threshold));
    }
    Ok(ClassMetrics { ap, counts })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Frame-level AP per class: detections pooled over videos, matched against
/// annotated frames of the same video and frame index.
pub fn f_map(preds: &[VideoPrediction], gts: &[GroundTruth], num_classes: usize, threshold: f64) -> Result<(f64, ClassMetrics)> {
    check_inputs(preds, gts, num_classes)?;
    let dets: Vec<(usize, f64, &Detection)> = preds
        .iter()
        .flat_map(|p| p.detections.iter())
        .map(|d| (d.class_id, d.score, d))
        .collect();
    let frames: Vec<(usize, (&str, usize, &Region))> = gts
        .iter()
        .flat_map(|g| g.regions.iter().map(move |(f, r)| (g.class_id, (g.video_id.as_str(), *f, r))))
        .collect();
    let m = per_class(num_classes, &dets, &frames, threshold, |d, (vid, f, r)| {
        if d.video_id == *vid && d.frame_index == *f {
            iou(&d.region, r).map(Some)
        } else {
            Ok(None)
        }
    })?;
    Ok((mean(m.ap.values().copied()), m))
}

/// Video-level AP per class over tubes, matched with [`tube_iou`].
pub fn v_map(preds: &[VideoPrediction], gts: &[GroundTruth], num_classes: usize, threshold: f64) -> Result<(f64, ClassMetrics)> {
    check_inputs(preds, gts, num_classes)?;
    let dets: Vec<(usize, f64, &Tube)> = preds
        .iter()
        .filter_map(|p| p.tube.as_ref())
        .map(|t| (t.class_id, t.score, t))
        .collect();
    let tubes: Vec<(usize, Tube)> = gts
        .iter()
        .filter(|g| !g.regions.is_empty())
        .map(|g| (g.class_id, g.tube()))
        .collect();
    let m = per_class(num_classes, &dets, &tubes, threshold, |d, g| {
        if d.video_id == g.video_id {
            tube_iou(d, g).map(Some)
        } else {
            Ok(None)
        }
    })?;
    Ok((mean(m.ap.values().copied()), m))
}

/// f-mAP and v-mAP at every threshold.
pub fn evaluate(
    preds: &[VideoPrediction],
    gts: &[GroundTruth],
    class_names: &[String],
    thresholds: &[f64],
) -> Result<MetricsReport> {
    let k = class_names.len();
    let mut report = MetricsReport {
        counts: BTreeMap::new(),
        levels: BTreeMap::new(),
    };
    for &thr in thresholds {
        let (fm, fc) = f_map(preds, gts, k, thr)?;
        let (vm, vc) = v_map(preds, gts, k, thr)?;
        let mut per_class = BTreeMap::new();
        for (c, &fa) in &fc.ap {
            per_class.insert(
                class_names[*c].clone(),
                ClassAp {
                    frame_ap: fa,
                    video_ap: vc.ap.get(c).copied().unwrap_or(0.0),
                },
            );
        }
        report.levels.insert(
            level_key(thr),
            LevelReport {
                f_map: fm,
                v_map: vm,
                per_class,
            },
        );
        report.counts.insert(
            level_key(thr),
            LevelCounts {
                frame: fc.counts,
                video: vc.counts,
            },
        );
    }
    Ok(report)
}
