use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, DatasetIndex};
use crate::{Error, Result};

/// Contents of `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub labeled_fraction: f64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

impl SplitManifest {
    pub fn from_index(index: &DatasetIndex, seed: u64, labeled_fraction: f64) -> Self {
        SplitManifest {
            seed,
            labeled_fraction,
            labeled_ids: index.labeled_ids.clone(),
            unlabeled_ids: index.unlabeled_ids.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Replaces the labeled/unlabeled subsets of `index` with this manifest.
    pub fn apply(&self, index: &DatasetIndex) -> Result<DatasetIndex> {
        let train: BTreeSet<String> = index.train_ids().into_iter().collect();
        for id in self.labeled_ids.iter().chain(&self.unlabeled_ids) {
            if !train.contains(id) {
                return Err(Error::Config(format!("split manifest names unknown training video {id}")));
            }
        }
        let mut out = index.clone();
        out.labeled_ids = self.labeled_ids.clone();
        out.unlabeled_ids = self.unlabeled_ids.clone();
        out.validate_split()?;
        Ok(out)
    }
}

/// Per-class stratified split of the training videos: each class keeps
/// `round(fraction · n_class)` labeled videos chosen by a seeded shuffle.
pub fn split_labeled(index: &DatasetIndex, labeled_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for id in index.train_ids() {
        let class = index.annotations[&id].class_id;
        by_class.entry(class).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (class, mut ids) in by_class {
        ids.sort();
        ids.shuffle(&mut rng);
        let take = (labeled_fraction * ids.len() as f64).round() as usize;
        if take == 0 {
            return Err(Error::InvalidArgument(format!(
                "labeled fraction {labeled_fraction} leaves class {class} ({}) without labeled videos",
                index.class_names.get(class).map(String::as_str).unwrap_or("?")
            )));
        }
        labeled.extend(ids[..take].iter().cloned());
        unlabeled.extend(ids[take..].iter().cloned());
    }
    labeled.sort();
    unlabeled.sort();
    let mut out = index.clone();
    out.labeled_ids = labeled;
    out.unlabeled_ids = unlabeled;
    Ok(out)
}

/// Keeps a seeded random subset of at most `count` unlabeled videos.
pub fn limit_unlabeled(index: &DatasetIndex, count: usize, seed: u64) -> DatasetIndex {
    let mut ids = index.unlabeled_ids.clone();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(count);
    ids.sort();
    let mut out = index.clone();
    out.unlabeled_ids = ids;
    out
}
