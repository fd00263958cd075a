//! The training loop: two-view forward passes, per-mode loss assembly, Adam
//! updates, per-epoch validation, checkpointing and resume.

mod checkpoint;
mod config;
mod predict;
mod step;

pub use checkpoint::{
    decode_optim, decode_params, encode_optim, encode_params, load_checkpoint, save_checkpoint, Checkpoint, Manifest,
    RngStates, MANIFEST_FILE, OPTIM_FILE, PARAMS_FILE,
};
pub use config::{flatten, model_mismatch, parse_override, unflatten, TrainConfig};
pub use predict::{clip_starts, evaluate_params, ground_truth, predict_video, predict_videos, VideoOutput};
pub use step::{batch_gradients, check_finite, item_terms, BatchOutcome, ItemTerms, StepSettings};

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augmentation, AugRecord, Strength};
use crate::dataio::{
    limit_unlabeled, load_dataset, split_labeled, DatasetIndex, MixedBatch, MixedBatchSampler, SamplerMode,
    SplitManifest, VideoStore, SPLIT_FILE,
};
use crate::evalkit::MetricsReport;
use crate::losses::LossBreakdown;
use crate::model::{init_params, ModelConfig, Params};
use crate::optim::Adam;
use crate::schedule::{plateau_step, rampup_w};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_LOG_FILE: &str = "eval_log.jsonl";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";
pub const DETERMINISTIC_ENV: &str = "STSSL_DETERMINISTIC";

/// Whether `STSSL_DETERMINISTIC=1` is set. Data loading is single-worker
/// either way; the flag is recorded with each checkpoint.
pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Mutable training state of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: Params,
    pub optim: Adam,
    sampler: MixedBatchSampler,
    aug_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_history: Vec<f64>,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub deterministic: bool,
}

impl Trainer {
    /// `index` must already carry the labeled/unlabeled split.
    pub fn new(config: TrainConfig, index: &DatasetIndex, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(index.class_count(), in_channels);
        model.validate()?;
        let params = init_params(&model, config.seed)?;
        let optim = Adam::new(config.adam, &params);
        let sampler_mode = if config.mode.is_semi() && !index.unlabeled_ids.is_empty() {
            SamplerMode::Semi
        } else {
            SamplerMode::Supervised
        };
        let sampler = MixedBatchSampler::new(index, sampler_mode, config.batch_size, sub_seed(config.seed, 1))?
            .with_clip_shape(config.frames, config.skip, Some((config.resolution, config.resolution)));
        Ok(Trainer {
            aug_rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 2)),
            lr: config.lr,
            model,
            params,
            optim,
            sampler,
            epoch: 0,
            step: 0,
            loss_history: Vec::new(),
            best_metric: None,
            best_epoch: None,
            deterministic: deterministic_from_env(),
            config,
        })
    }

    /// Steps per epoch: the configured value, or enough half-batches to see
    /// the labeled subset once.
    pub fn steps_per_epoch(&self, index: &DatasetIndex) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| (2 * index.labeled_ids.len()).div_ceil(self.config.batch_size).max(1))
    }

    /// Coherence weight for the epoch being trained.
    pub fn current_w(&self) -> f64 {
        let c = &self.config;
        rampup_w(self.epoch, c.ramp.length(c.epochs), c.ramp.w_max)
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings {
            mode: self.config.mode,
            weights: self.config.weights(self.current_w()),
            margin: self.config.margin,
            window: self.config.coherence_window,
            both: self.config.both_variant,
        }
    }

    pub fn next_batch(&mut self, index: &DatasetIndex, store: &VideoStore) -> Result<MixedBatch> {
        self.sampler.next_batch(index, store)
    }

    /// One optimizer update on `batch` with freshly sampled strong views.
    pub fn train_step(&mut self, batch: &MixedBatch) -> Result<LossBreakdown> {
        let records: Vec<AugRecord> = batch
            .items
            .iter()
            .map(|_| sample_augmentation(Strength::Strong, &mut self.aug_rng))
            .collect();
        self.train_step_with(batch, &records)
    }

    /// One optimizer update with the given augmentation records.
    pub fn train_step_with(&mut self, batch: &MixedBatch, records: &[AugRecord]) -> Result<LossBreakdown> {
        let out = batch_gradients(&self.model, &self.params, &batch.items, records, &self.settings(), None)?;
        let mut breakdown = out.breakdown;
        breakdown.step = self.step;
        check_finite(&breakdown, self.step as usize, out.tape_total)?;
        self.optim.update(&mut self.params, &out.grads, self.lr)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Trains one epoch and applies the plateau policy to the learning rate.
    pub fn train_epoch(&mut self, index: &DatasetIndex, store: &VideoStore) -> Result<Vec<LossBreakdown>> {
        let steps = self.steps_per_epoch(index);
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch(index, store)?;
            log.push(self.train_step(&batch)?);
        }
        let mean = log.iter().map(|b| b.total).sum::<f64>() / log.len() as f64;
        self.loss_history.push(mean);
        self.lr = plateau_step(&self.loss_history, self.lr, &self.config.plateau);
        self.epoch += 1;
        Ok(log)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            epoch: self.epoch,
            step: self.step,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            rng_states: RngStates {
                sampler: self.sampler.state().clone(),
                augment: self.aug_rng.clone(),
            },
            best_metric: self.best_metric,
            best_epoch: self.best_epoch,
            lr: self.lr,
            loss_history: self.loss_history.clone(),
            params_sha256: String::new(),
            optim_sha256: String::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            deterministic: self.deterministic,
            config: self.config.clone(),
            model: self.model.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.params, &self.optim, &self.manifest())
    }

    /// Restores a checkpoint. A config hash mismatch is refused unless
    /// `allow_config_change`; a model mismatch is always refused.
    pub fn restore(&mut self, ckpt: Checkpoint, allow_config_change: bool) -> Result<()> {
        let m = ckpt.manifest;
        if let Some((field, saved, now)) = model_mismatch(&m.model, &self.model) {
            return Err(Error::Checkpoint(format!(
                "model config mismatch in field {field}: checkpoint has {saved}, current run has {now}"
            )));
        }
        if m.config_hash != self.config.hash() && !allow_config_change {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs current {}; pass the override flag to resume anyway",
                m.config_hash,
                self.config.hash()
            )));
        }
        self.sampler.set_state(m.rng_states.sampler)?;
        self.aug_rng = m.rng_states.augment;
        self.params = ckpt.params;
        self.optim = ckpt.optim;
        self.epoch = m.epoch;
        self.step = m.step;
        self.lr = m.lr;
        self.loss_history = m.loss_history;
        self.best_metric = m.best_metric;
        self.best_epoch = m.best_epoch;
        Ok(())
    }
}

/// Run-time switches of [`fit`] that do not affect the result.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from `<out>/last` when it exists.
    pub resume: bool,
    pub allow_config_change: bool,
    /// Stop once this many epochs are complete (for staged runs).
    pub stop_after: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub lr: f64,
    pub w: f64,
    pub train_loss: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub out_dir: PathBuf,
    pub epochs_completed: usize,
    pub params: Params,
    pub model: ModelConfig,
    pub best_metric: Option<f64>,
    pub last_report: Option<MetricsReport>,
    /// Step records written during this call.
    pub train_log: Vec<LossBreakdown>,
}

/// The split a run trains on: from `labeled_fraction` when set, else from
/// the dataset's split manifest; then optionally capped unlabeled.
pub fn prepare_split(config: &TrainConfig, data_root: &Path) -> Result<DatasetIndex> {
    let index = load_dataset(data_root)?;
    let index = match config.labeled_fraction {
        Some(f) => split_labeled(&index, f, config.seed)?,
        None => {
            let p = data_root.join(SPLIT_FILE);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "no labeled_fraction given and no {} in {}",
                    SPLIT_FILE,
                    data_root.display()
                )));
            }
            SplitManifest::load(&p)?.apply(&index)?
        }
    };
    Ok(match config.unlabeled_limit {
        Some(n) => limit_unlabeled(&index, n, config.seed),
        None => index,
    })
}

fn append_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Error::json(path.display().to_string(), e))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Drops log records past the checkpoint being resumed from.
fn trim_log(path: &Path, key: &str, keep_below: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::json(path.display().to_string(), e))?;
        if v[key].as_u64().is_some_and(|k| k < keep_below) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

pub fn read_eval_log(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

/// Trains `config` on the dataset at `data_root`, writing checkpoints and
/// logs under `out_dir`. Validation runs every `eval_every` epochs on the
/// dataset's validation split; the best checkpoint is kept by f-mAP@0.5.
pub fn fit(config: &TrainConfig, data_root: &Path, out_dir: &Path, opts: &FitOptions) -> Result<FitResult> {
    config.validate()?;
    let index = prepare_split(config, data_root)?;
    let mut ids = index.train_ids();
    ids.extend(index.val_ids.iter().cloned());
    let store = VideoStore::load(&index, &ids)?;
    let channels = index.videos.values().next().map(|v| v.channels).unwrap_or(3);
    let mut trainer = Trainer::new(config.clone(), &index, channels)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cfg_json = serde_json::to_string_pretty(config).map_err(|e| Error::json(CONFIG_FILE, e))?;
    fs::write(out_dir.join(CONFIG_FILE), cfg_json).map_err(|e| Error::io(out_dir.join(CONFIG_FILE), e))?;
    SplitManifest::from_index(&index, config.seed, config.labeled_fraction.unwrap_or(f64::NAN)).save(&out_dir.join(SPLIT_FILE))?;

    let train_log = out_dir.join(TRAIN_LOG_FILE);
    let eval_log = out_dir.join(EVAL_LOG_FILE);
    let last = out_dir.join(LAST_DIR);
    let best = out_dir.join(BEST_DIR);
    if opts.resume && last.join(MANIFEST_FILE).exists() {
        trainer.restore(load_checkpoint(&last)?, opts.allow_config_change)?;
        trim_log(&train_log, "step", trainer.step)?;
        trim_log(&eval_log, "epoch", trainer.epoch as u64 + 1)?;
    } else {
        for p in [&train_log, &eval_log] {
            fs::write(p, "").map_err(|e| Error::io(p, e))?;
        }
        if best.exists() {
            fs::remove_dir_all(&best).map_err(|e| Error::io(&best, e))?;
        }
        trainer.save(&last)?;
    }

    let mut written = Vec::new();
    let mut last_report = None;
    let stop = opts.stop_after.unwrap_or(config.epochs).min(config.epochs);
    while trainer.epoch < stop {
        let w = trainer.current_w();
        let lr = trainer.lr;
        let records = trainer.train_epoch(&index, &store)?;
        append_lines(&train_log, &records)?;
        let train_loss = *trainer.loss_history.last().expect("epoch recorded");
        written.extend(records);

        let epoch = trainer.epoch;
        let due = epoch % config.eval_every == 0 || epoch == config.epochs;
        if due && !index.val_ids.is_empty() {
            let report = evaluate_params(&index, &store, &index.val_ids, config, &trainer.model, &trainer.params)?;
            let metric = report.f_map(0.5).unwrap_or(0.0);
            if opts.verbose {
                eprintln!(
                    "epoch {epoch:>3}  loss {train_loss:.5}  lr {lr:.2e}  w {w:.4}  f-mAP@0.5 {metric:.4}  v-mAP@0.5 {:.4}",
                    report.v_map(0.5).unwrap_or(0.0)
                );
            }
            append_lines(
                &eval_log,
                &[EvalRecord {
                    epoch,
                    lr,
                    w,
                    train_loss,
                    report: report.clone(),
                }],
            )?;
            if trainer.best_metric.is_none_or(|b| metric > b) {
                trainer.best_metric = Some(metric);
                trainer.best_epoch = Some(epoch);
                trainer.save(&best)?;
            }
            last_report = Some(report);
        } else if opts.verbose {
            eprintln!("epoch {epoch:>3}  loss {train_loss:.5}  lr {lr:.2e}  w {w:.4}");
        }
        trainer.save(&last)?;
    }

    Ok(FitResult {
        out_dir: out_dir.to_path_buf(),
        epochs_completed: trainer.epoch,
        best_metric: trainer.best_metric,
        params: trainer.params,
        model: trainer.model,
        last_report,
        train_log: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugRecord;
    use crate::dataio::{generate_synthetic_dataset, SynthConfig};

    fn tiny_config(mode: crate::losses::Mode) -> TrainConfig {
        let mut c = TrainConfig {
            mode,
            epochs: 2,
            batch_size: 2,
            steps_per_epoch: Some(2),
            frames: 4,
            skip: 1,
            resolution: 16,
            labeled_fraction: Some(0.5),
            seed: 3,
            ..TrainConfig::default()
        };
        c.model.input_pool = 1;
        c.model.encoder_channels = vec![3, 4];
        c.model.decoder_channels = vec![3];
        c.model.capsules.primary_types = 2;
        c.model.capsules.primary_dim = 3;
        c.model.capsules.class_dim = 4;
        c
    }

    fn tiny_data(dir: &Path) {
        let cfg = SynthConfig {
            num_videos: 12,
            classes: 2,
            frames_per_video: 8,
            height: 16,
            width: 16,
            seed: 5,
            shape_half_size: (0.15, 0.25),
            distractors: 1,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(dir, &cfg).unwrap();
    }

    #[test]
    fn supervised_step_has_no_consistency_terms() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_data(tmp.path());
        let cfg = tiny_config(crate::losses::Mode::Supervised);
        let index = prepare_split(&cfg, tmp.path()).unwrap();
        let store = VideoStore::load(&index, &index.train_ids()).unwrap();
        let mut t = Trainer::new(cfg, &index, 3).unwrap();
        let batch = t.next_batch(&index, &store).unwrap();
        assert!(batch.items.iter().all(|i| i.label.is_some()));
        let b = t.train_step(&batch).unwrap();
        assert_eq!((b.cc, b.lc), (0.0, 0.0));
        assert!((b.total - (b.sup_cls + b.sup_loc)).abs() < 1e-12);
    }

    #[test]
    fn identity_augmentation_gives_zero_localization_consistency() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_data(tmp.path());
        let cfg = tiny_config(crate::losses::Mode::SemiLc);
        let index = prepare_split(&cfg, tmp.path()).unwrap();
        let store = VideoStore::load(&index, &index.train_ids()).unwrap();
        let mut t = Trainer::new(cfg, &index, 3).unwrap();
        let batch = t.next_batch(&index, &store).unwrap();
        let records = vec![AugRecord::identity(); batch.len()];
        let b = t.train_step_with(&batch, &records).unwrap();
        assert_eq!(b.lc, 0.0);
    }

    #[test]
    fn semi_modes_record_consistent_totals() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_data(tmp.path());
        for mode in crate::losses::Mode::ALL {
            let cfg = tiny_config(mode);
            let index = prepare_split(&cfg, tmp.path()).unwrap();
            let store = VideoStore::load(&index, &index.train_ids()).unwrap();
            let mut t = Trainer::new(cfg, &index, 3).unwrap();
            let batch = t.next_batch(&index, &store).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let records: Vec<AugRecord> = (0..batch.len()).map(|_| sample_augmentation(Strength::Strong, &mut rng)).collect();
            let out = batch_gradients(&t.model, &t.params, &batch.items, &records, &t.settings(), None).unwrap();
            assert!((out.breakdown.total - out.tape_total).abs() < 1e-9, "{mode}");
            assert_eq!(out.breakdown.cc != 0.0, mode.uses_cc(), "{mode}");
            assert_eq!(out.breakdown.lc != 0.0, mode.uses_lc(), "{mode}");
        }
    }

    #[test]
    fn full_fraction_semi_lc_is_well_defined() {
        let tmp = tempfile::tempdir().unwrap();
        tiny_data(tmp.path());
        let cfg = TrainConfig {
            labeled_fraction: Some(1.0),
            ..tiny_config(crate::losses::Mode::SemiLc)
        };
        let index = prepare_split(&cfg, tmp.path()).unwrap();
        assert!(index.unlabeled_ids.is_empty());
        let store = VideoStore::load(&index, &index.train_ids()).unwrap();
        let mut t = Trainer::new(cfg, &index, 3).unwrap();
        let batch = t.next_batch(&index, &store).unwrap();
        let b = t.train_step(&batch).unwrap();
        assert!(b.total.is_finite() && b.lc > 0.0);
    }

    #[test]
    fn zero_epochs_returns_initial_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        tiny_data(&data);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config(crate::losses::Mode::SemiVar)
        };
        let out = tmp.path().join("run");
        let r = fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
        assert_eq!(r.epochs_completed, 0);
        assert!(r.train_log.is_empty());
        assert_eq!(fs::read_to_string(out.join(TRAIN_LOG_FILE)).unwrap(), "");
        let ck = load_checkpoint(&out.join(LAST_DIR)).unwrap();
        assert_eq!(ck.params, init_params(&r.model, cfg.seed).unwrap());
        assert_eq!(ck.manifest.epoch, 0);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        tiny_data(&data);
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_config(crate::losses::Mode::SemiGrad)
        };
        let out = tmp.path().join("run");
        fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
        let a = out.join(LAST_DIR);
        let ck = load_checkpoint(&a).unwrap();
        let b = tmp.path().join("copy");
        save_checkpoint(&b, &ck.params, &ck.optim, &ck.manifest).unwrap();
        for f in [PARAMS_FILE, OPTIM_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        tiny_data(&data);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config(crate::losses::Mode::SemiLc)
        };
        let out = tmp.path().join("run");
        fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
        let m = out.join(LAST_DIR).join(MANIFEST_FILE);
        let text = fs::read_to_string(&m).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["config_hash"] = serde_json::Value::from("0000");
        fs::write(&m, v.to_string()).unwrap();
        assert!(load_checkpoint(&out.join(LAST_DIR)).is_err());

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params_sha256"] = serde_json::Value::from("abcd");
        fs::write(&m, v.to_string()).unwrap();
        assert!(load_checkpoint(&out.join(LAST_DIR)).unwrap_err().to_string().contains("params.bin"));
    }

    #[test]
    fn resume_refuses_changed_config_and_names_model_field() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        tiny_data(&data);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config(crate::losses::Mode::SemiLc)
        };
        let out = tmp.path().join("run");
        fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
        let resume = FitOptions {
            resume: true,
            ..FitOptions::default()
        };
        let changed = TrainConfig { lr: 3e-4, ..cfg.clone() };
        let err = fit(&changed, &data, &out, &resume).unwrap_err();
        assert!(err.to_string().contains("config hash mismatch"));
        let forced = FitOptions {
            allow_config_change: true,
            ..resume.clone()
        };
        fit(&changed, &data, &out, &forced).unwrap();

        let mut other = cfg.clone();
        other.model.capsules.routing_iters = 1;
        let err = fit(&other, &data, &out, &forced).unwrap_err();
        assert!(err.to_string().contains("model.capsules.routing_iters"), "{err}");
    }
}
