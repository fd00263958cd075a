use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_clip, valid_starts, Annotation, Clip, DatasetIndex, VideoStore};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Every slot is filled from the labeled subset.
    Supervised,
    /// Half labeled, half unlabeled.
    Semi,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTarget {
    pub annotation: Annotation,
    pub class_id: usize,
    /// `[T, H, W]` binary map at clip resolution.
    pub loc: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub clip: Clip,
    pub label: Option<LabeledTarget>,
}

/// A shuffled batch; labeled items carry their target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub items: Vec<BatchItem>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labeled(&self) -> impl Iterator<Item = (&Clip, &LabeledTarget)> {
        self.items.iter().filter_map(|i| i.label.as_ref().map(|l| (&i.clip, l)))
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &Clip> {
        self.items.iter().filter(|i| i.label.is_none()).map(|i| &i.clip)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    epochs: u64,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0, epochs: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.epochs += 1;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Serializable mutable state of a [`MixedBatchSampler`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    labeled: Cycler,
    unlabeled: Cycler,
}

/// Draws batches by cycling the labeled and unlabeled subsets independently,
/// reshuffling each at the end of its own pass. Clip starts are uniform over
/// the valid positions of each video.
#[derive(Debug, Clone)]
pub struct MixedBatchSampler {
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    mode: SamplerMode,
    batch_size: usize,
    frames: usize,
    skip: usize,
    resolution: Option<(usize, usize)>,
    state: SamplerState,
}

impl MixedBatchSampler {
    pub fn new(index: &DatasetIndex, mode: SamplerMode, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if index.labeled_ids.is_empty() {
            return Err(Error::InvalidArgument("no labeled videos to sample".into()));
        }
        if mode == SamplerMode::Semi {
            if batch_size % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "mixed batches need an even batch size, got {batch_size}"
                )));
            }
            if index.unlabeled_ids.is_empty() {
                return Err(Error::InvalidArgument(
                    "unlabeled subset is empty; use supervised mode instead".into(),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labeled = Cycler::new(index.labeled_ids.len(), &mut rng);
        let unlabeled = Cycler::new(index.unlabeled_ids.len(), &mut rng);
        Ok(MixedBatchSampler {
            labeled: index.labeled_ids.clone(),
            unlabeled: index.unlabeled_ids.clone(),
            mode,
            batch_size,
            frames: 8,
            skip: 2,
            resolution: None,
            state: SamplerState { rng, labeled, unlabeled },
        })
    }

    pub fn with_clip_shape(mut self, frames: usize, skip: usize, resolution: Option<(usize, usize)>) -> Self {
        self.frames = frames;
        self.skip = skip;
        self.resolution = resolution;
        self
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn set_state(&mut self, state: SamplerState) -> Result<()> {
        if state.labeled.order.len() != self.labeled.len() || state.unlabeled.order.len() != self.unlabeled.len() {
            return Err(Error::Checkpoint("sampler state does not match the current split".into()));
        }
        self.state = state;
        Ok(())
    }

    /// Ids for the next batch in shuffled order, paired with whether they
    /// come from the labeled subset.
    pub fn next_ids(&mut self) -> Vec<(String, bool)> {
        let st = &mut self.state;
        let n_lab = match self.mode {
            SamplerMode::Supervised => self.batch_size,
            SamplerMode::Semi => self.batch_size / 2,
        };
        let mut ids = Vec::with_capacity(self.batch_size);
        for _ in 0..n_lab {
            ids.push((self.labeled[st.labeled.next(&mut st.rng)].clone(), true));
        }
        for _ in n_lab..self.batch_size {
            ids.push((self.unlabeled[st.unlabeled.next(&mut st.rng)].clone(), false));
        }
        ids.shuffle(&mut st.rng);
        ids
    }

    pub fn next_batch(&mut self, index: &DatasetIndex, store: &VideoStore) -> Result<MixedBatch> {
        let ids = self.next_ids();
        let mut items = Vec::with_capacity(ids.len());
        for (id, is_labeled) in ids {
            let video = store.get(&id)?;
            let n = valid_starts(video.len(), self.frames, self.skip);
            if n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "video {id} has {} frames, too short for {} frames at skip {}",
                    video.len(),
                    self.frames,
                    self.skip
                )));
            }
            let start = self.state.rng.random_range(0..n);
            let clip = extract_clip(video, start, self.frames, self.skip, self.resolution)?;
            let label = if is_labeled {
                let annotation = index.annotations.get(&id).ok_or_else(|| Error::Annotation {
                    video_id: id.clone(),
                    frame: None,
                    reason: "labeled video has no annotation".into(),
                })?;
                let loc = annotation.target(&clip.frame_indices, video.size(), (clip.height(), clip.width()));
                Some(LabeledTarget {
                    annotation: annotation.clone(),
                    class_id: annotation.class_id,
                    loc,
                })
            } else {
                None
            };
            items.push(BatchItem { clip, label });
        }
        Ok(MixedBatch { items })
    }
}
