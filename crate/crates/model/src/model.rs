use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use brainseg_core::metrics::{Prediction, PromptSpec, Segmenter};
use brainseg_core::resample;
use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use candle_transformers::models::segment_anything::image_encoder::ImageEncoderViT;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EncoderVariant, ModelConfig};
use crate::decoder::{MaskDecoder, CLASS_HEAD_PREFIX};
use crate::init::{is_frozen, record_shapes, seeded_values, ShapeMap};
use crate::layers::resize_bilinear;
use crate::prompt::{gaussian_shape, PromptEncoder, GAUSSIAN_KEY};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("incompatible checkpoint {path}: {reason}")]
    IncompatibleCheckpoint { path: PathBuf, reason: String },
    #[error("checkpoint is missing {} tensors, first: {}", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingKeys(Vec<String>),
    #[error("non-finite value in model output")]
    NonFiniteActivation,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// JSON written next to every saved checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant: EncoderVariant,
    pub config: ModelConfig,
    pub head_shape: [usize; 4],
    /// Free-form run information (training config, manifest hashes, seed).
    #[serde(default)]
    pub run: serde_json::Value,
}

/// Frozen ViT image encoder, trainable box-prompt encoder, and a mask
/// decoder ending in a three-class convolutional projection.
pub struct SegModel {
    config: ModelConfig,
    device: Device,
    frozen: BTreeMap<String, Tensor>,
    trainable: VarMap,
    encoder: ImageEncoderViT,
    prompt_encoder: PromptEncoder,
    decoder: MaskDecoder,
    image_pe: Tensor,
}

impl std::fmt::Debug for SegModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegModel")
            .field("config", &self.config)
            .field("frozen_tensors", &self.frozen.len())
            .finish_non_exhaustive()
    }
}

fn build_encoder(cfg: &ModelConfig, vb: VarBuilder) -> candle_core::Result<ImageEncoderViT> {
    ImageEncoderViT::new(
        cfg.img_size,
        cfg.patch_size,
        3,
        cfg.encoder_embed_dim,
        cfg.encoder_depth,
        cfg.encoder_num_heads,
        cfg.prompt_embed_dim,
        true,
        true,
        true,
        cfg.encoder_window_size,
        &cfg.encoder_global_attn_indexes,
        vb,
    )
}

/// Every tensor name and shape the architecture declares.
pub fn parameter_shapes(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
    cfg.validate().map_err(ModelError::InvalidConfig)?;
    Ok(record_shapes(|vb| {
        build_encoder(cfg, vb.pp("image_encoder"))?;
        let g = vb.get(gaussian_shape(cfg.prompt_embed_dim), GAUSSIAN_KEY)?;
        PromptEncoder::new(cfg.prompt_embed_dim, cfg.grid_size(), cfg.img_size, g, vb.pp("prompt_encoder"))?;
        MaskDecoder::new(cfg, vb.pp("mask_decoder"))?;
        Ok(())
    })?)
}

/// Number of scalar parameters in the image encoder.
pub fn encoder_parameter_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(parameter_shapes(cfg)?
        .iter()
        .filter(|(k, _)| k.starts_with("image_encoder."))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

impl SegModel {
    /// Randomly initialized model; the seed determines every parameter.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = parameter_shapes(&config)?;
        let device = Device::Cpu;
        let mut tensors = BTreeMap::new();
        for (name, values) in seeded_values(&shapes, seed) {
            let t = Tensor::from_vec(values, shapes[&name].as_slice(), &device)?;
            tensors.insert(name, t);
        }
        Self::from_tensors(config, &shapes, tensors)
    }

    /// The desk-scale stand-in model.
    pub fn init_tiny(seed: u64) -> Result<Self> {
        Self::init(ModelConfig::tiny(), seed)
    }

    fn from_tensors(config: ModelConfig, shapes: &ShapeMap, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let device = Device::Cpu;
        let mut frozen = BTreeMap::new();
        let trainable = VarMap::new();
        {
            let mut vars = trainable.data().lock().expect("var map lock");
            for (name, shape) in shapes {
                let t = tensors
                    .remove(name)
                    .ok_or_else(|| ModelError::MissingKeys(vec![name.clone()]))?
                    .to_dtype(DType::F32)?;
                if t.dims() != shape.as_slice() {
                    return Err(ModelError::InvalidInput(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                if is_frozen(name) {
                    frozen.insert(name.clone(), t.detach());
                } else {
                    vars.insert(name.clone(), Var::from_tensor(&t)?);
                }
            }
        }
        let frozen_map: HashMap<String, Tensor> = frozen.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let vb_frozen = VarBuilder::from_tensors(frozen_map, DType::F32, &device);
        let vb_train = VarBuilder::from_varmap(&trainable, DType::F32, &device);
        let encoder = build_encoder(&config, vb_frozen.pp("image_encoder"))?;
        let prompt_encoder = PromptEncoder::new(
            config.prompt_embed_dim,
            config.grid_size(),
            config.img_size,
            frozen[GAUSSIAN_KEY].clone(),
            vb_train.pp("prompt_encoder"),
        )?;
        let decoder = MaskDecoder::new(&config, vb_train.pp("mask_decoder"))?;
        let image_pe = prompt_encoder.dense_pe(&device)?;
        Ok(Self {
            config,
            device,
            frozen,
            trainable,
            encoder,
            prompt_encoder,
            decoder,
            image_pe,
        })
    }

    /// Load published weights (`.safetensors`, or a PyTorch `.pth`/`.pt`
    /// state dict). The class projection has no pretrained counterpart and
    /// is initialized from `seed`.
    pub fn load_pretrained(path: impl AsRef<Path>, config: ModelConfig, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let shapes = parameter_shapes(&config)?;
        let mut found = read_weights(path)?;
        let missing: Vec<String> = shapes
            .keys()
            .filter(|k| !k.starts_with(CLASS_HEAD_PREFIX) && !found.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ModelError::MissingKeys(missing));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in &shapes {
            if let Some(t) = found.remove(name) {
                if t.dims() != shape.as_slice() {
                    return Err(ModelError::IncompatibleCheckpoint {
                        path: path.to_path_buf(),
                        reason: format!("{name} has shape {:?}, expected {shape:?}", t.dims()),
                    });
                }
                tensors.insert(name.clone(), t);
            }
        }
        let head_shapes: ShapeMap = shapes
            .iter()
            .filter(|(k, _)| k.starts_with(CLASS_HEAD_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (name, values) in seeded_values(&head_shapes, seed) {
            let t = Tensor::from_vec(values, head_shapes[&name].as_slice(), &Device::Cpu)?;
            tensors.insert(name, t);
        }
        Self::from_tensors(config, &shapes, tensors)
    }

    /// Write all weights as safetensors plus a `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>, run: serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut all: HashMap<String, Tensor> = self.frozen.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, var) in self.trainable_vars() {
            all.insert(name, var.as_tensor().detach());
        }
        candle_core::safetensors::save(&all, path)?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            variant: self.config.variant,
            config: self.config.clone(),
            head_shape: self.config.head_shape(),
            run,
        };
        let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }

    /// Load a checkpoint written by [`SegModel::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let path = path.as_ref();
        let bad = |reason: String| ModelError::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let sidecar = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| bad(format!("{}: {e}", sidecar.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", meta.format_version)));
        }
        if meta.head_shape != meta.config.head_shape() {
            return Err(bad(format!("head shape {:?} does not match config", meta.head_shape)));
        }
        let shapes = parameter_shapes(&meta.config)?;
        let tensors: BTreeMap<String, Tensor> = read_weights(path)?.into_iter().collect();
        let missing: Vec<String> = shapes.keys().filter(|k| !tensors.contains_key(*k)).cloned().collect();
        if !missing.is_empty() {
            return Err(ModelError::MissingKeys(missing));
        }
        let model = Self::from_tensors(meta.config.clone(), &shapes, tensors)?;
        Ok((model, meta))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Image-encoder weights (and the fixed Fourier projection); never updated.
    pub fn frozen_tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.frozen
    }

    /// Prompt-encoder and decoder parameters, sorted by name.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let vars = self.trainable.data().lock().expect("var map lock");
        let mut out: Vec<(String, Var)> = vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Copies of the trainable parameter values.
    pub fn snapshot_trainable(&self) -> Result<BTreeMap<String, Tensor>> {
        self.trainable_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore_trainable(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.trainable_vars() {
            let t = snapshot
                .get(&name)
                .ok_or_else(|| ModelError::MissingKeys(vec![name.clone()]))?;
            var.set(t)?;
        }
        Ok(())
    }

    /// Grayscale slices in `[0, 1]` to a `(B, 3, S, S)` encoder input.
    pub fn preprocess(&self, images: &[ArrayView2<f32>]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| ModelError::InvalidInput("empty batch".into()))?;
        let s = self.config.img_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.dim() != first.dim() || img.is_empty() {
                return Err(ModelError::InvalidInput(format!(
                    "image shape {:?} (batch starts with {:?})",
                    img.dim(),
                    first.dim()
                )));
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(ModelError::InvalidInput(format!("pixel value {v} outside [0, 1]")));
            }
            let resized = resample::bilinear(img.view(), s, s);
            data.extend(resized.iter().copied());
        }
        let x = Tensor::from_vec(data, (images.len(), 1, s, s), &self.device)?;
        Ok(Tensor::cat(&[&x, &x, &x], 1)?)
    }

    /// Image embeddings `(B, D, g, g)`, detached from any gradient graph.
    pub fn encode(&self, images: &[ArrayView2<f32>]) -> Result<Tensor> {
        let x = self.preprocess(images)?;
        // the encoder's position table only broadcasts over a batch of one
        let parts = (0..images.len())
            .map(|i| self.encoder.forward(&x.narrow(0, i, 1)?))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?.detach())
    }

    /// Class logits `(B, 3, rows, cols)` from precomputed embeddings.
    pub fn decode(&self, embeddings: &Tensor, prompts: &[PromptSpec], rows: usize, cols: usize) -> Result<Tensor> {
        if prompts.len() != embeddings.dim(0)? {
            return Err(ModelError::InvalidInput(format!(
                "{} prompts for a batch of {}",
                prompts.len(),
                embeddings.dim(0)?
            )));
        }
        let (sparse, dense) = self.prompt_encoder.forward(prompts, &self.device)?;
        let logits = self.decoder.forward(embeddings, &self.image_pe, &sparse, &dense)?;
        Ok(resize_bilinear(&logits, rows, cols)?)
    }

    /// Batched forward pass; logits match the input slice resolution.
    pub fn forward_batch(&self, images: &[ArrayView2<f32>], prompts: &[PromptSpec]) -> Result<Tensor> {
        let emb = self.encode(images)?;
        let (rows, cols) = images[0].dim();
        self.decode(&emb, prompts, rows, cols)
    }

    /// Logit map `(3, rows, cols)` for one slice.
    pub fn forward(&self, image: ArrayView2<f32>, prompt: &PromptSpec) -> Result<Array3<f32>> {
        let logits = self.forward_batch(&[image], std::slice::from_ref(prompt))?;
        let (rows, cols) = image.dim();
        let data: Vec<f32> = logits.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteActivation);
        }
        Ok(Array3::from_shape_vec((self.config.num_classes, rows, cols), data).expect("logit shape"))
    }

    /// Label mask and per-class probabilities for one slice.
    pub fn predict(&self, image: ArrayView2<f32>, prompt: &PromptSpec) -> Result<Prediction> {
        Ok(softmax_argmax(self.forward(image, prompt)?.view()))
    }
}

impl Segmenter for SegModel {
    fn segment(
        &self,
        image: ArrayView2<f32>,
        prompt: &PromptSpec,
    ) -> std::result::Result<Prediction, Box<dyn std::error::Error + Send + Sync>> {
        Ok(self.predict(image, prompt)?)
    }
}

/// Per-pixel softmax over the class axis, then argmax of those
/// probabilities with ties going to the lowest class index.
pub fn softmax_argmax(logits: ArrayView3<f32>) -> Prediction {
    let (k, rows, cols) = logits.dim();
    let mut probabilities = Array3::<f32>::zeros((k, rows, cols));
    let mut label = Array2::<u8>::zeros((rows, cols));
    let mut exp = vec![0f64; k];
    for r in 0..rows {
        for c in 0..cols {
            let max = (0..k).map(|i| logits[[i, r, c]] as f64).fold(f64::NEG_INFINITY, f64::max);
            for (i, e) in exp.iter_mut().enumerate() {
                *e = (logits[[i, r, c]] as f64 - max).exp();
            }
            let total: f64 = exp.iter().sum();
            let mut best = 0;
            for i in 0..k {
                let p = (exp[i] / total) as f32;
                probabilities[[i, r, c]] = p;
                if p > probabilities[[best, r, c]] {
                    best = i;
                }
            }
            label[[r, c]] = best as u8;
        }
    }
    Prediction { label, probabilities }
}

/// `<checkpoint>.json`
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn read_weights(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bad = |reason: String| ModelError::IncompatibleCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    if !path.is_file() {
        return Err(bad("file not found".into()));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "safetensors" {
        return candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| bad(e.to_string()));
    }
    let mut last_err = String::from("no tensors found");
    for key in [None, Some("model"), Some("state_dict")] {
        match candle_core::pickle::read_all_with_key(path, key) {
            Ok(v) if !v.is_empty() => return Ok(v.into_iter().collect()),
            Ok(_) => {}
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(bad(last_err))
}
