//! Training loop, model bundles, checkpoints and the synthetic benchmark.

mod checkpoint;
mod loader;
mod synth;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur::BlurSpec;
use crate::data::{ImageRecord, Splits};
use crate::error::{Error, Result};
use crate::loss::{
    categorical_cross_entropy, categorical_cross_entropy_grad, combined_loss, combined_loss_grad, LossConfig, NUM_GRADES,
};
use crate::nn::{Backbone, Network, Optimizer, OptimizerKind};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_META_KEY};
pub use loader::{ImageLoader, CACHE_LIMIT_BYTES};
pub use synth::{make_synthetic_dataset, render_fundus, DomainStyle, SynthImage, SynthSpec, MIN_SYNTH_IMAGES};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// How the blurred class is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on grades, uniform-target loss on blurred twins.
    #[default]
    Custom,
    /// A sixth output for the blurred class and plain cross-entropy.
    Cce6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub backbone: Backbone,
    /// Safetensors file with torchvision-named ResNet-50 weights.
    pub pretrained_weights: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub image_size: u32,
    pub seeds: Vec<u64>,
    pub loss: LossConfig,
    pub loss_mode: LossMode,
    /// `None` trains the plain cross-entropy baseline.
    pub blur: Option<BlurSpec>,
    /// Training batches used to re-estimate batch-norm statistics after each
    /// epoch (0 keeps the running averages from training).
    pub bn_recalibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Resnet50Pretrained,
            pretrained_weights: None,
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.001,
            optimizer: OptimizerKind::Adam,
            image_size: 224,
            seeds: DEFAULT_SEEDS.to_vec(),
            loss: LossConfig::default(),
            loss_mode: LossMode::Custom,
            blur: Some(BlurSpec::default()),
            bn_recalibration_batches: 50,
        }
    }
}

impl TrainConfig {
    /// Small CNN on 64-pixel inputs.
    pub fn desk_scale() -> Self {
        Self { backbone: Backbone::SmallCnn, image_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be a positive number"));
        }
        let min_size = match self.backbone {
            Backbone::SmallCnn => 8,
            Backbone::Resnet50Pretrained => 32,
        };
        if self.image_size < min_size {
            return Err(Error::config("train.image_size", format!("must be at least {min_size} for {}", self.backbone.as_str())));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("train.seeds", "at least one seed is required"));
        }
        self.loss.validate()?;
        if let Some(b) = &self.blur {
            b.validate()?;
        }
        Ok(())
    }

    /// Width of the model head.
    pub fn num_outputs(&self) -> usize {
        match self.loss_mode {
            LossMode::Custom => self.loss.num_classes,
            LossMode::Cce6 => self.loss.num_classes + 1,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hash_json(&value)
    }

    /// Hash with the given dotted fields removed, for comparing variants.
    pub fn hash_excluding(&self, fields: &[&str]) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        for field in fields {
            let mut parts: Vec<&str> = field.split('.').collect();
            let last = parts.pop().expect("non-empty field");
            let mut node = &mut value;
            for p in parts {
                node = &mut node[p];
            }
            if let Some(obj) = node.as_object_mut() {
                obj.remove(last);
            }
        }
        hash_json(&value)
    }
}

pub(crate) fn hash_json(value: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so the encoding is canonical.
    let bytes = serde_json::to_vec(value).expect("json encodes");
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    pub seed: u64,
    /// Epoch (0-based) whose weights the bundle holds.
    pub epoch: usize,
    pub git_revision: Option<String>,
    pub config: TrainConfig,
}

/// A network together with the configuration that produced it.
pub struct ModelBundle {
    pub network: Network,
    pub meta: ModelMeta,
}

/// Inference batch size.
const EVAL_BATCH: usize = 64;

impl ModelBundle {
    pub fn image_size(&self) -> u32 {
        self.meta.config.image_size
    }

    /// Evaluation-mode logits for an NCHW batch.
    pub fn logits(&mut self, batch: Array4<f32>) -> Array2<f32> {
        let out = self.network.forward(batch, false).logits;
        assert_eq!(out.ncols(), self.meta.config.num_outputs(), "head width");
        out
    }

    pub fn features(&mut self, batch: Array4<f32>) -> Array2<f32> {
        self.network.forward(batch, false).features
    }

    /// Predicted grade per image: argmax over the real-grade logits only.
    pub fn predict(&mut self, batch: Array4<f32>) -> Vec<usize> {
        let logits = self.logits(batch);
        argmax_grades(&logits)
    }

    /// Logits and penultimate features for every record, in order.
    pub fn infer_records(&mut self, records: &[ImageRecord]) -> Result<(Array2<f32>, Array2<f32>)> {
        let loader = ImageLoader::new(records, self.image_size())?;
        self.infer_loader(&loader)
    }

    pub(crate) fn infer_loader(&mut self, loader: &ImageLoader) -> Result<(Array2<f32>, Array2<f32>)> {
        let mut logits = Array2::zeros((0, self.meta.config.num_outputs()));
        let mut features = Array2::zeros((0, self.network.feature_dim()));
        let idx: Vec<usize> = (0..loader.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let out = self.network.forward(loader.batch(chunk)?, false);
            logits.append(Axis(0), out.logits.view()).expect("width");
            features.append(Axis(0), out.features.view()).expect("width");
        }
        Ok((logits, features))
    }
}

/// Argmax over the first `NUM_GRADES` columns (ties go to the lowest index).
pub fn argmax_grades(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..NUM_GRADES.min(row.len()) {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fresh model for `cfg` with weights initialised from `seed`.
pub fn build_model(cfg: &TrainConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let outputs = cfg.num_outputs();
    let network = match cfg.backbone {
        Backbone::SmallCnn => Network::small_cnn(outputs, seed),
        Backbone::Resnet50Pretrained => Network::resnet50_pretrained(cfg.pretrained_weights.as_deref(), outputs, seed)?,
    };
    Ok(ModelBundle {
        network,
        meta: ModelMeta { config_hash: cfg.hash(), seed, epoch: 0, git_revision: None, config: cfg.clone() },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
    /// Mean loss over original (grade-labelled) samples.
    pub oi_mean: Option<f64>,
    /// Mean loss over blurred samples.
    pub bi_mean: Option<f64>,
    pub bi_batches: usize,
    pub val_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Parameter snapshot keyed by name.
type NamedParams = Vec<(String, ndarray::ArrayD<f32>)>;

/// Trains one model for one seed. When `log_path` is given, one JSON line is
/// appended per epoch. Returns the weights of the best validation epoch.
pub fn train(cfg: &TrainConfig, splits: &Splits, seed: u64, log_path: Option<&Path>) -> Result<(ModelBundle, TrainHistory)> {
    cfg.validate()?;
    let train_set = &splits.train;
    if train_set.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let n_blurred = train_set.iter().filter(|r| r.is_blurred()).count();
    match (&cfg.blur, n_blurred) {
        (None, n) if n > 0 => {
            return Err(Error::config("blur", format!("blur is disabled but the training set contains {n} blurred records")))
        }
        (Some(_), 0) => {
            return Err(Error::config(
                "blur",
                "blur is enabled but the training set has no blurred records; run forge-blur first",
            ))
        }
        _ => {}
    }
    let val: Vec<ImageRecord> = splits.val.iter().filter(|r| !r.is_blurred()).cloned().collect();
    if val.is_empty() {
        return Err(Error::Training("validation set is empty".into()));
    }

    let mut bundle = build_model(cfg, seed)?;
    bundle.meta.git_revision = git_revision();
    let mut log = log_path
        .map(|p| {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            File::create(p).map_err(|e| Error::io(p, e))
        })
        .transpose()?;

    let train_loader = ImageLoader::new(train_set, cfg.image_size)?;
    let val_loader = ImageLoader::new(&val, cfg.image_size)?;
    let labels: Vec<usize> = train_set.iter().map(|r| usize::from(r.label)).collect();
    let val_labels: Vec<usize> = val.iter().map(|r| usize::from(r.label)).collect();

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, NamedParams)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0f64, 0usize);
        let (mut oi_sum, mut oi_n, mut bi_sum, mut bi_n, mut bi_batches) = (0f64, 0usize, 0f64, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_loader.batch(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = bundle.network.forward(x, true);
            let z = out.logits.mapv(f64::from);
            let non_finite = |message: String| Error::NonFinite { epoch, batch: b, message };
            if z.iter().any(|v| !v.is_finite()) {
                return Err(non_finite("model produced non-finite logits".into()));
            }
            let (loss, grad) = match cfg.loss_mode {
                LossMode::Custom => (combined_loss(z.view(), &y, &cfg.loss)?, combined_loss_grad(z.view(), &y, &cfg.loss)?),
                LossMode::Cce6 => (categorical_cross_entropy(z.view(), &y)?, categorical_cross_entropy_grad(z.view(), &y)),
            };
            if !loss.total.is_finite() {
                return Err(non_finite(format!("loss is {}", loss.total)));
            }
            for (&l, &v) in y.iter().zip(&loss.per_sample) {
                if l == cfg.loss.blur_label {
                    bi_sum += v;
                    bi_n += 1;
                } else {
                    oi_sum += v;
                    oi_n += 1;
                }
            }
            if y.contains(&cfg.loss.blur_label) {
                bi_batches += 1;
            }
            sum += loss.per_sample.iter().sum::<f64>();
            count += y.len();
            bundle.network.backward(&grad.mapv(|v| v as f32));
            optimizer.step(&mut bundle.network);
        }

        if cfg.bn_recalibration_batches > 0 {
            let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).take(cfg.bn_recalibration_batches).collect();
            let batches = chunks.iter().map(|c| train_loader.batch(c)).collect::<Result<Vec<_>>>()?;
            bundle.network.recalibrate_batchnorm(batches);
        }
        let (val_logits, _) = bundle.infer_loader(&val_loader)?;
        let preds = argmax_grades(&val_logits);
        let correct = preds.iter().zip(&val_labels).filter(|(p, l)| p == l).count();
        let val_accuracy = 100.0 * correct as f64 / val_labels.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: sum / count as f64,
            oi_mean: (oi_n > 0).then(|| oi_sum / oi_n as f64),
            bi_mean: (bi_n > 0).then(|| bi_sum / bi_n as f64),
            bi_batches,
            val_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!("seed {seed} epoch {epoch}: loss {:.4} val_acc {:.2}", record.train_loss, record.val_accuracy);
        if let Some(f) = &mut log {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| Error::io(log_path.expect("log path"), e))?;
        }
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, bundle.network.state()));
            history.best_epoch = epoch;
        }
        history.epochs.push(record);
    }

    let (_, state) = best.expect("at least one epoch");
    let state = state.into_iter().collect();
    bundle.network.load_state(&state).map_err(Error::Training)?;
    bundle.meta.epoch = history.best_epoch;
    Ok((bundle, history))
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.learning_rate), (20, 32, 0.001));
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.num_outputs(), 5);
    }

    #[test]
    fn validation_names_keys() {
        let key = |cfg: TrainConfig| match cfg.validate() {
            Err(Error::InvalidConfig { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key(TrainConfig { epochs: 0, ..TrainConfig::desk_scale() }), "train.epochs");
        assert_eq!(key(TrainConfig { batch_size: 0, ..TrainConfig::desk_scale() }), "train.batch_size");
        assert_eq!(key(TrainConfig { learning_rate: 0.0, ..TrainConfig::desk_scale() }), "train.learning_rate");
        let mut even = TrainConfig::desk_scale();
        even.blur.as_mut().unwrap().kernel = 150;
        assert_eq!(key(even), "blur.kernel");
    }

    #[test]
    fn cce6_widens_head() {
        let cfg = TrainConfig { loss_mode: LossMode::Cce6, ..TrainConfig::desk_scale() };
        assert_eq!(cfg.num_outputs(), 6);
        let mut bundle = build_model(&cfg, 0).unwrap();
        let logits = bundle.logits(Array4::zeros((2, 3, 16, 16)));
        assert_eq!(logits.ncols(), 6);
    }

    #[test]
    fn prediction_ignores_sixth_logit() {
        let logits = ndarray::arr2(&[[0.0, 1.0, 0.5, 0.0, 0.2, 9.0], [3.0, 1.0, 0.5, 0.0, 0.2, 9.0]]);
        assert_eq!(argmax_grades(&logits), vec![1, 0]);
    }

    #[test]
    fn small_cnn_emits_five_logits() {
        let mut bundle = build_model(&TrainConfig::desk_scale(), 0).unwrap();
        assert_eq!(bundle.logits(Array4::zeros((3, 3, 64, 64))).dim(), (3, 5));
    }

    #[test]
    fn pretrained_backbone_fails_loudly() {
        let cfg = TrainConfig::default();
        assert!(matches!(build_model(&cfg, 0), Err(Error::PretrainedUnavailable(_))));
    }

    #[test]
    fn hash_excluding_ignores_field() {
        let a = TrainConfig::desk_scale();
        let b = TrainConfig { loss_mode: LossMode::Cce6, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash_excluding(&["loss_mode"]), b.hash_excluding(&["loss_mode"]));
        let mut c = a.clone();
        c.blur.as_mut().unwrap().method = crate::blur::BlurMethod::Gaussian;
        assert_eq!(a.hash_excluding(&["blur.method"]), c.hash_excluding(&["blur.method"]));
        assert_ne!(a.hash_excluding(&["loss_mode"]), c.hash_excluding(&["loss_mode"]));
    }
}
