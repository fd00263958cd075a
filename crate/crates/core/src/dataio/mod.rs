//! On-disk video and annotation formats, the synthetic moving-shapes
//! generator, labeled/unlabeled splitting and the mixed-batch sampler.

pub mod container;
mod sampler;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autograd::linear_taps;
use crate::geometry::{BoxRegion, Region};
use crate::{Error, Result};

pub use sampler::{BatchItem, LabeledTarget, MixedBatch, MixedBatchSampler, SamplerMode, SamplerState};
pub use split::{limit_unlabeled, split_labeled, SplitManifest};
pub use synth::{generate_synthetic_dataset, Motion, MotionKind, SynthConfig, SynthLog, SYNTH_LOG_FILE};

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const SPLIT_FILE: &str = "split.json";
pub const VIDEO_DIR: &str = "videos";
pub const DEFAULT_FPS: f64 = 25.0;

/// A `T×H×W×C` block of unit-interval pixels with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub pixels: Array4<f64>,
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub fps: f64,
}

impl Clip {
    pub fn new(pixels: Array4<f64>, video_id: impl Into<String>, frame_indices: Vec<usize>, fps: f64) -> Result<Self> {
        let t = pixels.shape()[0];
        if t < 2 {
            return Err(Error::InvalidArgument("a clip needs at least two frames".into()));
        }
        if frame_indices.len() != t {
            return Err(Error::InvalidArgument(format!(
                "{} frame indices for {t} frames",
                frame_indices.len()
            )));
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("frame indices must be strictly increasing".into()));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidArgument("fps must be positive".into()));
        }
        Ok(Clip {
            pixels,
            video_id: video_id.into(),
            frame_indices,
            fps,
        })
    }

    pub fn frames(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationMode {
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub video_id: String,
    pub class_id: usize,
    pub trimmed: bool,
    /// Keyed by frame index; frames without an entry contain no action.
    pub frames: BTreeMap<usize, Region>,
}

impl Annotation {
    /// Binary localization target for the given frames, rescaled from the
    /// stored `(height, width)` to `out`.
    pub fn target(&self, frame_indices: &[usize], stored: (usize, usize), out: (usize, usize)) -> Array3<f64> {
        let (oh, ow) = out;
        let mut t = Array3::zeros((frame_indices.len(), oh, ow));
        let sx = ow as f64 / stored.1 as f64;
        let sy = oh as f64 / stored.0 as f64;
        for (i, f) in frame_indices.iter().enumerate() {
            let mask = match self.frames.get(f) {
                None => continue,
                Some(Region::Box(b)) => b.scaled(sx, sy).rasterize(oh, ow),
                Some(Region::Mask(m)) => resize_mask_nearest(m, oh, ow),
            };
            for ((y, x), &on) in mask.indexed_iter() {
                if on {
                    t[[i, y, x]] = 1.0;
                }
            }
        }
        t
    }
}

fn resize_mask_nearest(m: &Array2<bool>, oh: usize, ow: usize) -> Array2<bool> {
    let (h, w) = m.dim();
    if (h, w) == (oh, ow) {
        return m.clone();
    }
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64) as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / ow as f64) as usize;
        m[[sy.min(h - 1), sx.min(w - 1)]]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoMeta {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub annotation_mode: AnnotationMode,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub annotations: BTreeMap<String, Annotation>,
    pub videos: BTreeMap<String, VideoMeta>,
}

impl DatasetIndex {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.videos
            .iter()
            .filter(|(_, m)| m.split == Split::Train)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn container_path(&self, video_id: &str) -> PathBuf {
        container_path(&self.root, video_id)
    }

    /// Checks the split invariants: disjoint subsets, labeled ids annotated.
    pub fn validate_split(&self) -> Result<()> {
        let labeled: BTreeSet<_> = self.labeled_ids.iter().collect();
        if let Some(dup) = self.unlabeled_ids.iter().find(|id| labeled.contains(id)) {
            return Err(Error::InvalidArgument(format!(
                "video {dup} is both labeled and unlabeled"
            )));
        }
        for id in &self.labeled_ids {
            if !self.annotations.contains_key(id) {
                return Err(Error::Annotation {
                    video_id: id.clone(),
                    frame: None,
                    reason: "labeled video has no annotation".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn container_path(root: &Path, video_id: &str) -> PathBuf {
    root.join(VIDEO_DIR).join(format!("{video_id}.stv"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameEntry {
    Box([f64; 4]),
    MaskPath(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub class_id: usize,
    pub trimmed: bool,
    #[serde(default)]
    pub split: Split,
    pub frames: BTreeMap<usize, FrameEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub class_names: Vec<String>,
    pub mode: AnnotationMode,
    pub videos: Vec<VideoRecord>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Loads and validates a dataset root. Every training video starts out
/// labeled; apply [`split_labeled`] or a split manifest afterwards.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    let file: AnnotationFile = read_json(&root.join(ANNOTATION_FILE))?;
    let k = file.class_names.len();
    if k < 2 {
        return Err(Error::Config("annotation file needs at least two classes".into()));
    }
    let mut annotations = BTreeMap::new();
    let mut videos = BTreeMap::new();
    let mut labeled_ids = Vec::new();
    let mut val_ids = Vec::new();
    for rec in &file.videos {
        if videos.contains_key(&rec.id) {
            return Err(Error::DuplicateVideo(rec.id.clone()));
        }
        let bad = |frame: Option<usize>, reason: String| Error::Annotation {
            video_id: rec.id.clone(),
            frame,
            reason,
        };
        if rec.class_id >= k {
            return Err(bad(None, format!("class_id {} out of range (K = {k})", rec.class_id)));
        }
        let path = container_path(root, &rec.id);
        if !path.exists() {
            return Err(Error::MissingContainer {
                video_id: rec.id.clone(),
                path,
            });
        }
        let header = container::read_header(&path)?;
        let mut frames = BTreeMap::new();
        for (&f, entry) in &rec.frames {
            if f >= header.frames {
                return Err(bad(Some(f), format!("frame index beyond video length {}", header.frames)));
            }
            let region = match (file.mode, entry) {
                (AnnotationMode::Box, FrameEntry::Box([x1, y1, x2, y2])) => {
                    let b = BoxRegion::new(*x1, *y1, *x2, *y2);
                    if !b.is_valid_within(header.width, header.height) {
                        return Err(bad(
                            Some(f),
                            format!("box [{x1}, {y1}, {x2}, {y2}] is empty, inverted or out of bounds"),
                        ));
                    }
                    Region::Box(b)
                }
                (AnnotationMode::Mask, FrameEntry::MaskPath(p)) => {
                    let mpath = root.join(p);
                    if !mpath.exists() {
                        return Err(Error::MissingContainer {
                            video_id: rec.id.clone(),
                            path: mpath,
                        });
                    }
                    let m = container::read(&mpath)?;
                    let s = m.shape();
                    if s[0] != 1 || s[3] != 1 || s[1] != header.height || s[2] != header.width {
                        return Err(bad(Some(f), format!("mask container has shape {s:?}")));
                    }
                    Region::Mask(Array2::from_shape_fn((s[1], s[2]), |(y, x)| m[[0, y, x, 0]] > 127))
                }
                _ => return Err(bad(Some(f), "frame entry does not match the dataset mode".into())),
            };
            frames.insert(f, region);
        }
        if rec.trimmed && frames.len() != header.frames {
            return Err(bad(
                None,
                format!("trimmed video annotates {} of {} frames", frames.len(), header.frames),
            ));
        }
        videos.insert(
            rec.id.clone(),
            VideoMeta {
                frames: header.frames,
                height: header.height,
                width: header.width,
                channels: header.channels,
                split: rec.split,
            },
        );
        match rec.split {
            Split::Train => labeled_ids.push(rec.id.clone()),
            Split::Val => val_ids.push(rec.id.clone()),
        }
        annotations.insert(
            rec.id.clone(),
            Annotation {
                video_id: rec.id.clone(),
                class_id: rec.class_id,
                trimmed: rec.trimmed,
                frames,
            },
        );
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        class_names: file.class_names,
        annotation_mode: file.mode,
        labeled_ids,
        unlabeled_ids: Vec::new(),
        val_ids,
        annotations,
        videos,
    })
}

/// A decoded video held in memory as bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredVideo {
    pub id: String,
    pub pixels: Array4<u8>,
    pub fps: f64,
}

impl StoredVideo {
    pub fn len(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }
}

/// In-memory cache of decoded containers.
#[derive(Debug, Clone, Default)]
pub struct VideoStore {
    videos: BTreeMap<String, StoredVideo>,
}

impl VideoStore {
    pub fn load<'a>(index: &DatasetIndex, ids: impl IntoIterator<Item = &'a String>) -> Result<Self> {
        let mut videos = BTreeMap::new();
        for id in ids {
            if videos.contains_key(id) {
                continue;
            }
            let path = index.container_path(id);
            if !path.exists() {
                return Err(Error::MissingContainer {
                    video_id: id.clone(),
                    path,
                });
            }
            let pixels = container::read(&path)?;
            videos.insert(
                id.clone(),
                StoredVideo {
                    id: id.clone(),
                    pixels,
                    fps: DEFAULT_FPS,
                },
            );
        }
        Ok(VideoStore { videos })
    }

    pub fn get(&self, id: &str) -> Result<&StoredVideo> {
        self.videos
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("video {id} is not loaded")))
    }
}

/// Number of valid clip start positions in a video of `len` frames.
pub fn valid_starts(len: usize, num_frames: usize, skip: usize) -> usize {
    let span = (num_frames - 1) * skip + 1;
    if len >= span {
        len - span + 1
    } else {
        0
    }
}

/// Extracts frames `start, start+skip, …` and rescales to `resolution`
/// (`(height, width)`) with bilinear resampling when it differs.
pub fn extract_clip(
    video: &StoredVideo,
    start: usize,
    num_frames: usize,
    skip: usize,
    resolution: Option<(usize, usize)>,
) -> Result<Clip> {
    if num_frames < 2 || skip < 1 {
        return Err(Error::InvalidArgument("need num_frames >= 2 and skip >= 1".into()));
    }
    let last = start + (num_frames - 1) * skip;
    if last >= video.len() {
        return Err(Error::InvalidArgument(format!(
            "video {} has {} frames; clip needs frame {last}",
            video.id,
            video.len()
        )));
    }
    let indices: Vec<usize> = (0..num_frames).map(|i| start + i * skip).collect();
    let (h, w) = video.size();
    let c = video.pixels.shape()[3];
    let (oh, ow) = resolution.unwrap_or((h, w));
    let pixels = if (oh, ow) == (h, w) {
        Array4::from_shape_fn((num_frames, h, w, c), |(i, y, x, ch)| {
            video.pixels[[indices[i], y, x, ch]] as f64 / 255.0
        })
    } else {
        let ty = linear_taps(h, oh);
        let tx = linear_taps(w, ow);
        Array4::from_shape_fn((num_frames, oh, ow, c), |(i, y, x, ch)| {
            let f = indices[i];
            let (y0, y1, fy) = ty[y];
            let (x0, x1, fx) = tx[x];
            let p = |yy: usize, xx: usize| video.pixels[[f, yy, xx, ch]] as f64 / 255.0;
            let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
            v.clamp(0.0, 1.0)
        })
    };
    Clip::new(pixels, video.id.clone(), indices, video.fps)
}
