use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::losses::{LocVariant, LossWeights, MarginParams, Mode};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::schedule::{PlateauPolicy, RampSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Defaults to one pass over the labeled subset at half a batch per step.
    pub steps_per_epoch: Option<usize>,
    pub frames: usize,
    pub skip: usize,
    /// Square side the clips are resampled to.
    pub resolution: usize,
    pub lr: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub coherence_window: usize,
    /// Localization consistency used by `semi-both`.
    pub both_variant: LocVariant,
    pub margin: MarginParams,
    pub adam: AdamConfig,
    pub ramp: RampSchedule,
    pub plateau: PlateauPolicy,
    /// `None` takes the split manifest stored with the dataset.
    pub labeled_fraction: Option<f64>,
    /// Keep only this many unlabeled videos.
    pub unlabeled_limit: Option<usize>,
    pub seed: u64,
    /// Binarization threshold for turning localization maps into detections.
    pub eval_threshold: f64,
    pub eval_every: usize,
    /// `output_size`, `num_classes` and `in_channels` are derived from the
    /// clip shape and the dataset.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let weights = LossWeights::default();
        TrainConfig {
            mode: Mode::SemiVar,
            epochs: 30,
            batch_size: 8,
            steps_per_epoch: None,
            frames: 8,
            skip: 2,
            resolution: 64,
            lr: 1e-4,
            lambda: weights.lambda,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            coherence_window: 2,
            both_variant: LocVariant::Variance,
            margin: MarginParams::default(),
            adam: AdamConfig::default(),
            ramp: RampSchedule::default(),
            plateau: PlateauPolicy::default(),
            labeled_fraction: None,
            unlabeled_limit: None,
            seed: 0,
            eval_threshold: 0.5,
            eval_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.mode.is_semi() && self.batch_size % 2 != 0 {
            return bad(format!("mode {} needs an even batch_size, got {}", self.mode, self.batch_size));
        }
        if self.frames < 2 || self.skip < 1 || self.resolution == 0 {
            return bad("frames >= 2, skip >= 1 and resolution >= 1 are required".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps_per_epoch == Some(0) || self.eval_every == 0 {
            return bad("steps_per_epoch and eval_every must be positive".into());
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("labeled_fraction must lie in (0, 1], got {f}"));
            }
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return bad(format!("eval_threshold must lie in (0, 1), got {}", self.eval_threshold));
        }
        self.weights(1.0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.ramp.validate()?;
        self.plateau.validate()
    }

    pub fn weights(&self, w: f64) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            w,
        }
    }

    /// Model configuration with the derived fields filled in.
    pub fn model_config(&self, num_classes: usize, in_channels: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            num_classes,
            output_size: [self.frames, self.resolution, self.resolution],
            ..self.model.clone()
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Applies dotted-key overrides. Every key must name an existing field.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<TrainConfig> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let cfg: TrainConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("bad override value: {e}")))?;
        Ok(cfg)
    }
}

/// Parses `key=value`; the value is JSON when it parses as JSON and a plain
/// string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    let v = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
    Ok((k.to_string(), v))
}

/// Object members become dotted keys; everything else is a leaf.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn go(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", value, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys do not collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// First dotted field where two model configurations differ.
pub fn model_mismatch(saved: &ModelConfig, current: &ModelConfig) -> Option<(String, Value, Value)> {
    let a = flatten(&serde_json::to_value(saved).expect("serializes"));
    let b = flatten(&serde_json::to_value(current).expect("serializes"));
    a.keys()
        .chain(b.keys())
        .find(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            (
                format!("model.{k}"),
                a.get(k).cloned().unwrap_or(Value::Null),
                b.get(k).cloned().unwrap_or(Value::Null),
            )
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_reference_values() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.frames, c.skip), (8, 8, 2));
        assert_eq!((c.lambda, c.lambda1, c.lambda2, c.coherence_window), (0.1, 0.3, 0.7, 2));
        assert_eq!(c.lr, 1e-4);
        assert_eq!((c.plateau.decay_factor, c.plateau.patience), (0.1, 5));
        assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.eps), (0.9, 0.999, 1e-8));
        c.validate().unwrap();
    }

    #[test]
    fn flat_round_trip_and_overrides() {
        let c = TrainConfig::default();
        let flat = c.to_flat();
        assert!(flat.contains_key("model.capsules.routing_iters"));
        assert!(flat.contains_key("ramp.ramp_length"));
        let back: TrainConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        assert_eq!(back, c);

        let mut ov = BTreeMap::new();
        for s in ["lr=5e-4", "mode=semi-grad", "ramp.ramp_length=7", "model.head=dense"] {
            let (k, v) = parse_override(s).unwrap();
            ov.insert(k, v);
        }
        let d = c.with_overrides(&ov).unwrap();
        assert_eq!(d.lr, 5e-4);
        assert_eq!(d.mode, Mode::SemiGrad);
        assert_eq!(d.ramp.ramp_length, Some(7));
        assert_ne!(d.hash(), c.hash());

        let mut bad = BTreeMap::new();
        bad.insert("learning_rate".to_string(), Value::from(0.1));
        assert!(c.with_overrides(&bad).unwrap_err().to_string().contains("learning_rate"));
        assert!(parse_override("lr").is_err());
    }

    #[test]
    fn mismatch_names_the_field() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.capsules.routing_iters = 5;
        let (k, _, _) = model_mismatch(&a, &b).unwrap();
        assert_eq!(k, "model.capsules.routing_iters");
        assert!(model_mismatch(&a, &a).is_none());
    }
}
