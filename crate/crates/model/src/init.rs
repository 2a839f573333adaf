//! Parameter discovery and seeded initialization.
//!
//! Module constructors are run once against a recording backend to learn
//! every parameter name and shape; values are then drawn from a single
//! ChaCha stream in sorted name order, so a seed fully determines a model.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Result, Shape, Tensor};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::decoder::CLASS_HEAD_PREFIX;
use crate::prompt::GAUSSIAN_KEY;

pub(crate) type ShapeMap = BTreeMap<String, Vec<usize>>;

#[derive(Default, Clone)]
struct Recorder(Arc<Mutex<ShapeMap>>);

impl SimpleBackend for Recorder {
    fn get(&self, s: Shape, name: &str, _: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        self.0.lock().unwrap().insert(name.to_string(), s.dims().to_vec());
        // a broadcast scalar: no storage proportional to the parameter size
        Tensor::zeros((), dtype, dev)?.broadcast_as(s)
    }

    fn get_unchecked(&self, name: &str, _: DType, _: &Device) -> Result<Tensor> {
        candle_core::bail!("shape of `{name}` is not known while recording")
    }

    fn contains_tensor(&self, _: &str) -> bool {
        true
    }
}

/// Names and shapes of every tensor `build` asks for.
pub(crate) fn record_shapes(build: impl FnOnce(VarBuilder) -> Result<()>) -> Result<ShapeMap> {
    let recorder = Recorder::default();
    build(VarBuilder::from_backend(Box::new(recorder.clone()), DType::F32, Device::Cpu))?;
    let shapes = recorder.0.lock().unwrap().clone();
    Ok(shapes)
}

/// Tensors that stay fixed during fine-tuning.
pub(crate) fn is_frozen(name: &str) -> bool {
    name.starts_with("image_encoder.") || name == GAUSSIAN_KEY
}

fn is_norm(name: &str) -> bool {
    let module = name.rsplit_once('.').map(|(m, _)| m).unwrap_or("");
    let last = module.rsplit('.').next().unwrap_or("");
    last.contains("norm") || module.ends_with("neck.1") || module.ends_with("neck.3") || module.ends_with("output_upscaling.1")
}

fn is_embedding(name: &str) -> bool {
    [
        "point_embeddings.",
        "not_a_point_embed.",
        "no_mask_embed.",
        "iou_token.",
        "mask_tokens.",
    ]
    .iter()
    .any(|p| name.contains(p))
}

fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product::<usize>().max(1)
}

/// Draw every tensor of `shapes`, in sorted order, from one seeded stream.
///
/// * norm scales 1 and shifts 0
/// * embeddings and the Fourier projection N(0, 1)
/// * absolute and relative position tables N(0, 0.02²)
/// * the class projection N(0, 0.01²) with zero bias
/// * other weights and biases U(±1/√fan_in), fan_in taken from the weight
pub(crate) fn seeded_values(shapes: &ShapeMap, seed: u64) -> BTreeMap<String, Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        let normal = |rng: &mut ChaCha8Rng, std: f32| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let is_weight = name.ends_with(".weight");
        let values = if is_norm(name) {
            vec![if is_weight { 1.0 } else { 0.0 }; n]
        } else if name.starts_with(CLASS_HEAD_PREFIX) {
            if is_weight {
                normal(&mut rng, 0.01)
            } else {
                vec![0.0; n]
            }
        } else if is_embedding(name) || name == GAUSSIAN_KEY {
            normal(&mut rng, 1.0)
        } else if name.ends_with("pos_embed") || name.ends_with("rel_pos_h") || name.ends_with("rel_pos_w") {
            normal(&mut rng, 0.02)
        } else {
            let fan = if shape.len() >= 2 {
                fan_in(shape)
            } else {
                let weight = format!("{}.weight", name.trim_end_matches(".bias"));
                shapes.get(&weight).map(|s| fan_in(s)).unwrap_or(1)
            };
            let bound = 1.0 / (fan as f32).sqrt();
            let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        out.insert(name.clone(), values);
    }
    out
}
