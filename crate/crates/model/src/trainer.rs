//! Fine-tuning loop: AdamW on the prompt encoder and decoder, weighted
//! cross-entropy, validation after every epoch, early stopping, and the
//! best-validation weights restored at the end.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use brainseg_core::dataset::{DatasetError, DatasetManifest, Plane, SlicePair, Split};
use brainseg_core::metrics::PromptMode;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{weighted_cross_entropy, LossError};
use crate::model::{ModelError, SegModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("slices in one batch differ in size")]
    RaggedBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Background, gray matter, white matter.
    pub class_weights: [f64; 3],
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, finishing the epoch's validation.
    pub max_steps: Option<usize>,
    pub prompt: PromptMode,
    /// Keep image embeddings in memory when train + val fit under this many slices.
    pub embedding_cache_slices: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 2,
            max_epochs: 10,
            class_weights: [0.2, 1.0, 1.0],
            weight_decay: 0.01,
            early_stop_patience: 3,
            seed: 0,
            max_steps: None,
            prompt: PromptMode::FullImage,
            embedding_cache_slices: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return bad(format!("class_weights {:?} must all be positive", self.class_weights));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: usize,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,wall_time_s";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{:.3}", r.epoch, r.train_loss, r.val_loss, r.wall_time_s);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Patience counter over validation losses; only strict improvements reset it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Record an epoch's validation loss; true means stop now.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        match self.best {
            Some((_, b)) if val_loss >= b => self.stale += 1,
            _ => {
                self.best = Some((epoch, val_loss));
                self.stale = 0;
            }
        }
        self.patience > 0 && self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch() == Some(epoch)
    }
}

/// Random access to training slices.
pub trait SliceSource {
    fn len(&self) -> usize;
    fn slice(&self, i: usize) -> Result<SlicePair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SliceSource for DatasetManifest {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn slice(&self, i: usize) -> Result<SlicePair> {
        Ok(self.load_pair(&self.entries[i])?)
    }
}

impl SliceSource for [SlicePair] {
    fn len(&self) -> usize {
        <[SlicePair]>::len(self)
    }

    fn slice(&self, i: usize) -> Result<SlicePair> {
        Ok(self[i].clone())
    }
}

impl SliceSource for Vec<SlicePair> {
    fn len(&self) -> usize {
        <[SlicePair]>::len(self)
    }

    fn slice(&self, i: usize) -> Result<SlicePair> {
        Ok(self[i].clone())
    }
}

struct Batcher<'a, S: SliceSource + ?Sized> {
    model: &'a SegModel,
    source: &'a S,
    cache: Option<HashMap<usize, Tensor>>,
}

impl<S: SliceSource + ?Sized> Batcher<'_, S> {
    /// Embeddings, prompts-ready pairs and stacked labels for `indices`.
    fn load(&mut self, indices: &[usize]) -> Result<(Tensor, Vec<SlicePair>, Array3<u8>)> {
        let pairs = indices
            .iter()
            .map(|&i| self.source.slice(i))
            .collect::<Result<Vec<_>>>()?;
        let dim = pairs[0].label.dim();
        if pairs.iter().any(|p| p.label.dim() != dim || p.image.dim() != dim) {
            return Err(TrainError::RaggedBatch);
        }
        let emb = match &mut self.cache {
            Some(cache) => {
                let mut parts = Vec::with_capacity(indices.len());
                for (&i, p) in indices.iter().zip(&pairs) {
                    if !cache.contains_key(&i) {
                        cache.insert(i, self.model.encode(&[p.image.view()])?);
                    }
                    parts.push(cache[&i].clone());
                }
                Tensor::cat(&parts, 0)?
            }
            None => {
                let views: Vec<ArrayView2<f32>> = pairs.iter().map(|p| p.image.view()).collect();
                self.model.encode(&views)?
            }
        };
        let mut labels = Array3::<u8>::zeros((pairs.len(), dim.0, dim.1));
        for (n, p) in pairs.iter().enumerate() {
            labels.index_axis_mut(ndarray::Axis(0), n).assign(&p.label);
        }
        Ok((emb, pairs, labels))
    }
}

fn batch_loss(
    model: &SegModel,
    emb: &Tensor,
    pairs: &[SlicePair],
    labels: &Array3<u8>,
    cfg: &TrainConfig,
) -> Result<Tensor> {
    let prompts: Vec<_> = pairs.iter().map(|p| cfg.prompt.prompt_for(p.label.view())).collect();
    let (_, rows, cols) = labels.dim();
    let logits = model.decode(emb, &prompts, rows, cols)?;
    weighted_cross_entropy(&logits, labels.view(), cfg.class_weights).map_err(TrainError::Loss)
}

/// Mean validation loss, weighting each batch by its size.
pub fn evaluate_loss<S: SliceSource + ?Sized>(model: &SegModel, source: &S, cfg: &TrainConfig) -> Result<f64> {
    let mut b = Batcher {
        model,
        source,
        cache: None,
    };
    mean_loss(&mut b, cfg)
}

fn mean_loss<S: SliceSource + ?Sized>(b: &mut Batcher<'_, S>, cfg: &TrainConfig) -> Result<f64> {
    let idx: Vec<usize> = (0..b.source.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let (emb, pairs, labels) = b.load(chunk)?;
        let loss = batch_loss(b.model, &emb, &pairs, &labels, cfg)?;
        total += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Fine-tune `model` in place. On return the model holds the weights of
/// the epoch with the lowest validation loss.
pub fn train<S, V>(model: &SegModel, train_set: &S, val_set: &V, cfg: &TrainConfig) -> Result<TrainHistory>
where
    S: SliceSource + ?Sized,
    V: SliceSource + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let vars: Vec<_> = model.trainable_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let cache = train_set.len() + val_set.len() <= cfg.embedding_cache_slices;
    let mut train_b = Batcher {
        model,
        source: train_set,
        cache: cache.then(HashMap::new),
    };
    let mut val_b = Batcher {
        model,
        source: val_set,
        cache: cache.then(HashMap::new),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_weights = model.snapshot_trainable()?;
    let mut records = Vec::new();
    let mut steps = 0usize;
    let mut stopped_early = false;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (emb, pairs, labels) = train_b.load(chunk)?;
            let loss = batch_loss(model, &emb, &pairs, &labels, cfg)
                .map_err(|e| match e {
                    TrainError::Loss(LossError::NonFiniteLoss) => TrainError::DivergedLoss { epoch, step: steps + 1 },
                    other => other,
                })?;
            opt.backward_step(&loss)?;
            steps += 1;
            sum += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            seen += chunk.len();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val_loss = mean_loss(&mut val_b, cfg)?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss { epoch, step: steps });
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} ({} steps)",
            record.train_loss,
            record.val_loss,
            steps
        );
        records.push(record);
        let stop = stopper.observe(epoch, val_loss);
        if stopper.improved_at(epoch) {
            best_weights = model.snapshot_trainable()?;
        }
        if stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    model.restore_trainable(&best_weights)?;
    Ok(TrainHistory {
        records,
        best_epoch: stopper.best_epoch().unwrap_or(1),
        stopped_early,
        steps,
    })
}

/// Which orientations a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plan {
    Axial,
    Coronal,
    Sagittal,
    Unified,
}

impl Plan {
    pub const ALL: [Plan; 4] = [Plan::Axial, Plan::Coronal, Plan::Sagittal, Plan::Unified];

    pub fn planes(self) -> Vec<Plane> {
        match self {
            Plan::Axial => vec![Plane::Axial],
            Plan::Coronal => vec![Plane::Coronal],
            Plan::Sagittal => vec![Plane::Sagittal],
            Plan::Unified => Plane::ALL.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Plan::Axial => "axial",
            Plan::Coronal => "coronal",
            Plan::Sagittal => "sagittal",
            Plan::Unified => "unified",
        }
    }
}

impl std::fmt::Display for Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Plan {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Plan::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown plan `{s}` (expected axial, coronal, sagittal or unified)"))
    }
}

/// The plan's manifest for `split`: one plane's file, or all three
/// concatenated in axial, coronal, sagittal order.
pub fn plan_manifest(root: &Path, plan: Plan, split: Split) -> Result<DatasetManifest> {
    let mut parts = Vec::new();
    for plane in plan.planes() {
        let path = root.join(DatasetManifest::file_name(plane, split));
        if !path.is_file() {
            return Err(TrainError::MissingManifest(path));
        }
        parts.push(DatasetManifest::read(&path)?);
    }
    Ok(DatasetManifest::concat(&parts)?)
}

/// Train one plan from the manifests under `root`.
pub fn run_experiment(model: &SegModel, root: &Path, plan: Plan, cfg: &TrainConfig) -> Result<TrainHistory> {
    let train_m = plan_manifest(root, plan, Split::Train)?;
    let val_m = plan_manifest(root, plan, Split::Val)?;
    train(model, &train_m, &val_m, cfg)
}
