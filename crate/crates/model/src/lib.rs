//! A MedSAM-style segmentation model for three-class brain tissue
//! labeling (background, gray matter, white matter), and its fine-tuning
//! loop.
//!
//! The ViT image encoder stays frozen. The box-prompt encoder and the mask
//! decoder are trained, and a 3x3 convolution on top of the decoder's
//! upscaled embedding and mask produces one logit map per class.

pub mod config;
pub mod loss;
pub mod model;
pub mod trainer;

mod decoder;
mod init;
mod layers;
mod prompt;

pub use config::{EncoderVariant, ModelConfig};
pub use loss::{weighted_cross_entropy, LossError};
pub use model::{encoder_parameter_count, softmax_argmax, CheckpointMeta, ModelError, SegModel};
pub use trainer::{train, EarlyStopping, Plan, TrainConfig, TrainError, TrainHistory};
