use ndarray::{s, Array1, Array3};

use super::config::TrainConfig;
use crate::autograd::bilinear_resize_map;
use crate::dataio::{extract_clip, DatasetIndex, StoredVideo, VideoStore};
use crate::evalkit::{evaluate, map_to_detections, GroundTruth, MetricsReport, VideoPrediction, DEFAULT_THRESHOLDS};
use crate::model::{forward, ModelConfig, Params};
use crate::{Error, Result};

/// Whole-video prediction on the stored frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoOutput {
    /// `[frames, height, width]` localization probabilities.
    pub loc: Array3<f64>,
    /// Class scores averaged over all clips.
    pub class_scores: Array1<f64>,
}

/// Clip starts that cover every frame reachable at this stride: one chain
/// of back-to-back clips per residue modulo `skip`, with the last clip of
/// each chain pulled back to fit.
pub fn clip_starts(len: usize, frames: usize, skip: usize) -> Result<Vec<usize>> {
    let span = (frames - 1) * skip + 1;
    if len < span {
        return Err(Error::InvalidArgument(format!(
            "a {len}-frame video is shorter than one {frames}-frame clip at skip {skip}"
        )));
    }
    let max_start = len - span;
    let mut starts = Vec::new();
    for r in 0..skip.min(max_start + 1) {
        let last = max_start - (max_start - r) % skip;
        let mut s = r;
        loop {
            starts.push(s);
            if s == last {
                break;
            }
            s = (s + frames * skip).min(last);
        }
    }
    Ok(starts)
}

pub fn predict_video(
    model: &ModelConfig,
    params: &Params,
    video: &StoredVideo,
    frames: usize,
    skip: usize,
) -> Result<VideoOutput> {
    let [_, rh, rw] = model.output_size;
    let (h, w) = video.size();
    let len = video.len();
    let mut sum = Array3::<f64>::zeros((len, rh, rw));
    let mut count = vec![0usize; len];
    let mut scores = Array1::<f64>::zeros(model.num_classes);
    let starts = clip_starts(len, frames, skip)?;
    for &start in &starts {
        let clip = extract_clip(video, start, frames, skip, Some((rh, rw)))?;
        let out = forward(&clip.pixels, model, params)?;
        scores += &out.class_scores;
        for (i, &f) in clip.frame_indices.iter().enumerate() {
            let mut dst = sum.slice_mut(s![f, .., ..]);
            dst += &out.loc.slice(s![i, .., ..]);
            count[f] += 1;
        }
    }
    scores /= starts.len() as f64;
    for f in 0..len {
        if count[f] > 0 {
            let c = count[f] as f64;
            sum.slice_mut(s![f, .., ..]).mapv_inplace(|v| v / c);
        }
    }
    // frames no clip reaches copy the nearest covered frame
    let covered: Vec<usize> = (0..len).filter(|&f| count[f] > 0).collect();
    for f in 0..len {
        if count[f] == 0 {
            let near = *covered.iter().min_by_key(|&&c| c.abs_diff(f)).expect("some frame is covered");
            let src = sum.slice(s![near, .., ..]).to_owned();
            sum.slice_mut(s![f, .., ..]).assign(&src);
        }
    }
    let loc = if (rh, rw) == (h, w) {
        sum
    } else {
        let map = bilinear_resize_map(&[len, rh, rw, 1], h, w);
        let data = map.apply(sum.as_slice().expect("standard layout"));
        Array3::from_shape_vec((len, h, w), data).expect("resized shape")
    };
    Ok(VideoOutput {
        loc,
        class_scores: scores,
    })
}

pub fn ground_truth(index: &DatasetIndex, ids: &[String]) -> Result<Vec<GroundTruth>> {
    ids.iter()
        .map(|id| {
            let a = index.annotations.get(id).ok_or_else(|| Error::Annotation {
                video_id: id.clone(),
                frame: None,
                reason: "no annotation for evaluated video".into(),
            })?;
            Ok(GroundTruth {
                video_id: id.clone(),
                class_id: a.class_id,
                regions: a.frames.clone(),
            })
        })
        .collect()
}

pub fn predict_videos(
    index: &DatasetIndex,
    store: &VideoStore,
    ids: &[String],
    config: &TrainConfig,
    model: &ModelConfig,
    params: &Params,
) -> Result<Vec<VideoPrediction>> {
    ids.iter()
        .map(|id| {
            let out = predict_video(model, params, store.get(id)?, config.frames, config.skip)?;
            let (detections, tube) = map_to_detections(
                id,
                &out.loc,
                out.class_scores.as_slice().expect("contiguous"),
                config.eval_threshold,
                index.annotation_mode,
            );
            Ok(VideoPrediction {
                video_id: id.clone(),
                detections,
                tube,
            })
        })
        .collect()
}

/// Predicts every video in `ids` and scores it at both IoU thresholds.
pub fn evaluate_params(
    index: &DatasetIndex,
    store: &VideoStore,
    ids: &[String],
    config: &TrainConfig,
    model: &ModelConfig,
    params: &Params,
) -> Result<MetricsReport> {
    let preds = predict_videos(index, store, ids, config, model, params)?;
    let gts = ground_truth(index, ids)?;
    evaluate(&preds, &gts, &index.class_names, &DEFAULT_THRESHOLDS)
}
