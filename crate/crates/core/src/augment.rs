//! Recorded, invertible clip augmentations and the cyclic sequence that
//! joins an original-view map with the inverted augmented-view map.

use std::rc::Rc;

use ndarray::{s, Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::SparseMap;
use crate::dataio::Clip;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum Transform {
    HorizontalFlip,
    /// Normalized crop box, resized back to the full frame.
    CropResize { x1: f64, y1: f64, x2: f64, y2: f64 },
    TemporalReverse,
    Photometric {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
}

impl Transform {
    pub fn is_geometric(&self) -> bool {
        !matches!(self, Transform::Photometric { .. })
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Transform::CropResize { x1, y1, x2, y2 } => {
                let ok = [x1, y1, x2, y2].iter().all(|v| (0.0..=1.0).contains(v)) && x1 < x2 && y1 < y2;
                if ok {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "degenerate crop ({x1}, {y1}, {x2}, {y2})"
                    )))
                }
            }
            Transform::Photometric {
                brightness,
                contrast,
                saturation,
            } => {
                if brightness.is_finite() && contrast >= 0.0 && saturation >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument("invalid photometric parameters".into()))
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub transforms: Vec<Transform>,
    pub strength: Strength,
}

impl AugRecord {
    pub fn identity() -> Self {
        AugRecord {
            transforms: Vec::new(),
            strength: Strength::Weak,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.transforms.iter().try_for_each(Transform::validate)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Draws a record. Weak: flip with probability 0.5 and a crop covering at
/// least 80% of the frame. Strong adds photometric jitter and a temporal
/// reverse with probability 0.5.
pub fn sample_augmentation<R: Rng + ?Sized>(strength: Strength, rng: &mut R) -> AugRecord {
    let mut transforms = Vec::new();
    if rng.random_bool(0.5) {
        transforms.push(Transform::HorizontalFlip);
    }
    let area: f64 = rng.random_range(0.8..=1.0);
    let log_ratio: f64 = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    // keep both sides within the frame so the area bound holds exactly
    let ratio = log_ratio.exp().clamp(area, 1.0 / area);
    let cw = (area * ratio).sqrt().min(1.0);
    let ch = (area / ratio).sqrt().min(1.0);
    let x1 = rng.random_range(0.0..=1.0 - cw);
    let y1 = rng.random_range(0.0..=1.0 - ch);
    transforms.push(Transform::CropResize {
        x1,
        y1,
        x2: x1 + cw,
        y2: y1 + ch,
    });
    if strength == Strength::Strong {
        transforms.push(Transform::Photometric {
            brightness: rng.random_range(-0.2..=0.2),
            contrast: rng.random_range(0.7..=1.3),
            saturation: rng.random_range(0.7..=1.3),
        });
        if rng.random_bool(0.5) {
            transforms.push(Transform::TemporalReverse);
        }
    }
    AugRecord { transforms, strength }
}

/// Bilinear taps sampling the normalized interval `[c0, c1]` of a length
/// `len` axis onto `len` output pixels.
fn crop_taps(len: usize, c0: f64, c1: f64) -> Vec<(usize, usize, f64)> {
    let n = len as f64;
    (0..len)
        .map(|o| {
            let u = (o as f64 + 0.5) / n;
            let pos = ((c0 + u * (c1 - c0)) * n - 0.5).clamp(0.0, n - 1.0);
            let i0 = pos.floor() as usize;
            (i0, (i0 + 1).min(len - 1), pos - i0 as f64)
        })
        .collect()
}

/// Inverse of [`crop_taps`]: original pixels whose centres fall inside
/// `[c0, c1]` sample the resized crop; the rest have no source.
fn uncrop_taps(len: usize, c0: f64, c1: f64) -> Vec<Option<(usize, usize, f64)>> {
    let n = len as f64;
    (0..len)
        .map(|p| {
            let q = (p as f64 + 0.5) / n;
            if q < c0 || q > c1 {
                return None;
            }
            let pos = ((q - c0) / (c1 - c0) * n - 0.5).clamp(0.0, n - 1.0);
            let i0 = pos.floor() as usize;
            Some((i0, (i0 + 1).min(len - 1), pos - i0 as f64))
        })
        .collect()
}

fn flat(shape: [usize; 4], t: usize, y: usize, x: usize, c: usize) -> usize {
    ((t * shape[1] + y) * shape[2] + x) * shape[3] + c
}

/// Sparse linear map of one geometric transform on a `[T,H,W,C]` grid, or
/// its inverse. `None` for photometric transforms.
fn step_map(tr: &Transform, shape: [usize; 4], inverse: bool) -> Option<SparseMap> {
    let [tn, h, w, ch] = shape;
    type Taps = Vec<Option<(usize, usize, f64)>>;
    let (ty, tx): (Taps, Taps) = match *tr {
        Transform::Photometric { .. } => return None,
        Transform::CropResize { x1, y1, x2, y2 } if inverse => (uncrop_taps(h, y1, y2), uncrop_taps(w, x1, x2)),
        Transform::CropResize { x1, y1, x2, y2 } => (
            crop_taps(h, y1, y2).into_iter().map(Some).collect(),
            crop_taps(w, x1, x2).into_iter().map(Some).collect(),
        ),
        Transform::HorizontalFlip => (
            (0..h).map(|y| Some((y, y, 0.0))).collect(),
            (0..w).map(|x| Some((w - 1 - x, w - 1 - x, 0.0))).collect(),
        ),
        Transform::TemporalReverse => (
            (0..h).map(|y| Some((y, y, 0.0))).collect(),
            (0..w).map(|x| Some((x, x, 0.0))).collect(),
        ),
    };
    let reverse = matches!(tr, Transform::TemporalReverse);
    let mut row_start = vec![0];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    for t in 0..tn {
        let st = if reverse { tn - 1 - t } else { t };
        for yt in &ty {
            for xt in &tx {
                for c in 0..ch {
                    if let (Some((y0, y1, fy)), Some((x0, x1, fx))) = (yt, xt) {
                        let taps = [
                            (*y0, *x0, (1.0 - fy) * (1.0 - fx)),
                            (*y0, *x1, (1.0 - fy) * fx),
                            (*y1, *x0, fy * (1.0 - fx)),
                            (*y1, *x1, fy * fx),
                        ];
                        for (yy, xx, wt) in taps {
                            if wt != 0.0 {
                                src.push(flat(shape, st, yy, xx, c));
                                weight.push(wt);
                            }
                        }
                    }
                    row_start.push(src.len());
                }
            }
        }
    }
    Some(SparseMap {
        in_shape: shape.to_vec(),
        out_shape: shape.to_vec(),
        row_start,
        src,
        weight,
    })
}

fn identity_map(shape: [usize; 4]) -> SparseMap {
    let n: usize = shape.iter().product();
    SparseMap {
        in_shape: shape.to_vec(),
        out_shape: shape.to_vec(),
        row_start: (0..=n).collect(),
        src: (0..n).collect(),
        weight: vec![1.0; n],
    }
}

/// `second ∘ first`.
fn compose(first: &SparseMap, second: &SparseMap) -> SparseMap {
    let mut row_start = vec![0];
    let mut src = Vec::new();
    let mut weight = Vec::new();
    let mut acc: Vec<(usize, f64)> = Vec::new();
    for o in 0..second.row_start.len() - 1 {
        acc.clear();
        for k in second.row_start[o]..second.row_start[o + 1] {
            let (mid, w) = (second.src[k], second.weight[k]);
            for j in first.row_start[mid]..first.row_start[mid + 1] {
                acc.push((first.src[j], w * first.weight[j]));
            }
        }
        acc.sort_by_key(|&(s, _)| s);
        let mut i = 0;
        while i < acc.len() {
            let (s, mut w) = acc[i];
            i += 1;
            while i < acc.len() && acc[i].0 == s {
                w += acc[i].1;
                i += 1;
            }
            src.push(s);
            weight.push(w);
        }
        row_start.push(src.len());
    }
    SparseMap {
        in_shape: first.in_shape.clone(),
        out_shape: second.out_shape.clone(),
        row_start,
        src,
        weight,
    }
}

fn loc_shape(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [t, h, w] if t > 0 && h > 0 && w > 0 => Ok([t, h, w, 1]),
        _ => Err(Error::Shape(format!("expected a [T, H, W] localization map, got {shape:?}"))),
    }
}

/// Map taking an augmented-view `[T,H,W]` localization map (flattened) to
/// the original-view grid.
pub fn inverse_map(record: &AugRecord, shape: &[usize]) -> Result<SparseMap> {
    record.validate()?;
    let s4 = loc_shape(shape)?;
    let mut total = identity_map(s4);
    for tr in record.transforms.iter().rev() {
        if let Some(m) = step_map(tr, s4, true) {
            total = compose(&total, &m);
        }
    }
    total.in_shape = shape.to_vec();
    total.out_shape = shape.to_vec();
    Ok(total)
}

/// Map applying the geometric part of `record` to a `[T,H,W]` map.
pub fn forward_map(record: &AugRecord, shape: &[usize]) -> Result<SparseMap> {
    record.validate()?;
    let s4 = loc_shape(shape)?;
    let mut total = identity_map(s4);
    for tr in &record.transforms {
        if let Some(m) = step_map(tr, s4, false) {
            total = compose(&total, &m);
        }
    }
    total.in_shape = shape.to_vec();
    total.out_shape = shape.to_vec();
    Ok(total)
}

fn apply_map3(map: &SparseMap, loc: &Array3<f64>) -> Array3<f64> {
    let data: Vec<f64> = loc.iter().copied().collect();
    Array3::from_shape_vec(loc.dim(), map.apply(&data)).expect("shape preserved")
}

/// Geometric transforms of `record` applied to a localization map, as the
/// model would see them on the augmented clip.
pub fn apply_to_localization(loc: &Array3<f64>, record: &AugRecord) -> Result<Array3<f64>> {
    Ok(apply_map3(&forward_map(record, loc.shape())?, loc))
}

/// Brings an augmented-view map back to the original pixel grid. Pixels
/// outside the crop are filled with 0; see [`validity_mask`].
pub fn invert_on_localization(loc: &Array3<f64>, record: &AugRecord) -> Result<Array3<f64>> {
    Ok(apply_map3(&inverse_map(record, loc.shape())?, loc).mapv(|v| v.clamp(0.0, 1.0)))
}

/// 1 where the inverted map has a source in the augmented view, else 0.
pub fn validity_mask(record: &AugRecord, shape: &[usize]) -> Result<Array3<f64>> {
    let map = inverse_map(record, shape)?;
    Ok(mask_from_map(&map, shape))
}

pub(crate) fn mask_from_map(map: &SparseMap, shape: &[usize]) -> Array3<f64> {
    let ones = vec![1.0; shape.iter().product()];
    let v: Vec<f64> = map.apply(&ones).into_iter().map(|x| if x > 0.5 { 1.0 } else { 0.0 }).collect();
    Array3::from_shape_vec((shape[0], shape[1], shape[2]), v).expect("shape")
}

/// Precomputed inversion for one record and map shape, ready for use on a tape.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub map: Rc<SparseMap>,
    pub valid: Array3<f64>,
}

impl Inversion {
    pub fn new(record: &AugRecord, shape: &[usize]) -> Result<Self> {
        let map = inverse_map(record, shape)?;
        let valid = mask_from_map(&map, shape);
        Ok(Inversion { map: Rc::new(map), valid })
    }
}

fn photometric(px: &mut Array4<f64>, brightness: f64, contrast: f64, saturation: f64) {
    let ch = px.shape()[3];
    let gray = |p: ndarray::ArrayView1<f64>| {
        if ch == 3 {
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        } else {
            p.mean().unwrap_or(0.0)
        }
    };
    px.mapv_inplace(|v| (v + brightness).clamp(0.0, 1.0));
    for mut frame in px.axis_iter_mut(Axis(0)) {
        let n = (frame.shape()[0] * frame.shape()[1]) as f64;
        let mean = frame.lanes(Axis(2)).into_iter().map(gray).sum::<f64>() / n;
        frame.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
        for mut p in frame.lanes_mut(Axis(2)) {
            let g = gray(p.view());
            p.mapv_inplace(|v| ((v - g) * saturation + g).clamp(0.0, 1.0));
        }
    }
}

/// Applies `record` to a clip in order. Frame indices keep describing the
/// source frames.
pub fn apply_to_clip(clip: &Clip, record: &AugRecord) -> Result<Clip> {
    record.validate()?;
    let mut px = clip.pixels.clone();
    let s = px.shape();
    let shape = [s[0], s[1], s[2], s[3]];
    for tr in &record.transforms {
        match *tr {
            Transform::Photometric {
                brightness,
                contrast,
                saturation,
            } => photometric(&mut px, brightness, contrast, saturation),
            Transform::HorizontalFlip => px = px.slice(s![.., .., ..;-1, ..]).to_owned(),
            Transform::TemporalReverse => px = px.slice(s![..;-1, .., .., ..]).to_owned(),
            Transform::CropResize { .. } => {
                let m = step_map(tr, shape, false).expect("geometric");
                let data: Vec<f64> = px.iter().copied().collect();
                px = Array4::from_shape_vec(px.raw_dim(), m.apply(&data)).expect("shape");
                px.mapv_inplace(|v| v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Clip {
        pixels: px,
        video_id: clip.video_id.clone(),
        frame_indices: clip.frame_indices.clone(),
        fps: clip.fps,
    })
}

/// `[o₁ … oₙ, gₙ₋₁ … g₂]`: the original frames followed by the temporally
/// flipped inverted augmented frames without their two junction frames.
pub fn build_cyclic_sequence(orig: &Array3<f64>, aug_inverted: &Array3<f64>) -> Result<Array3<f64>> {
    if orig.shape() != aug_inverted.shape() {
        return Err(Error::Shape(format!(
            "cyclic sequence needs equal shapes, got {:?} and {:?}",
            orig.shape(),
            aug_inverted.shape()
        )));
    }
    let n = orig.shape()[0];
    if n < 2 {
        return Err(Error::Shape("cyclic sequence needs at least two frames".into()));
    }
    let tail = aug_inverted.slice(s![1..n - 1;-1, .., ..]);
    Ok(ndarray::concatenate(Axis(0), &[orig.view(), tail]).expect("matching frame shapes"))
}
