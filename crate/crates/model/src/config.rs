use serde::{Deserialize, Serialize};

/// Encoder family a checkpoint or a fresh model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// ViT-B image encoder at 1024x1024 input.
    VitB,
    /// Small randomly initialized stand-in with the same interface.
    Tiny,
}

/// Architecture hyperparameters. Two presets exist: [`ModelConfig::vit_b`]
/// and [`ModelConfig::tiny`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: EncoderVariant,
    /// Native encoder input side length.
    pub img_size: usize,
    pub patch_size: usize,
    pub encoder_embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_num_heads: usize,
    pub encoder_window_size: usize,
    pub encoder_global_attn_indexes: Vec<usize>,
    /// Channel width shared by the encoder neck, prompt encoder and decoder.
    pub prompt_embed_dim: usize,
    pub decoder_depth: usize,
    pub decoder_num_heads: usize,
    pub decoder_mlp_dim: usize,
    pub num_classes: usize,
    /// Kernel size of the added class projection (odd).
    pub class_head_kernel: usize,
}

impl ModelConfig {
    pub fn vit_b() -> Self {
        Self {
            variant: EncoderVariant::VitB,
            img_size: 1024,
            patch_size: 16,
            encoder_embed_dim: 768,
            encoder_depth: 12,
            encoder_num_heads: 12,
            encoder_window_size: 14,
            encoder_global_attn_indexes: vec![2, 5, 8, 11],
            prompt_embed_dim: 256,
            decoder_depth: 2,
            decoder_num_heads: 8,
            decoder_mlp_dim: 2048,
            num_classes: 3,
            class_head_kernel: 3,
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: EncoderVariant::Tiny,
            img_size: 256,
            patch_size: 4,
            encoder_embed_dim: 64,
            encoder_depth: 2,
            encoder_num_heads: 4,
            encoder_window_size: 8,
            encoder_global_attn_indexes: vec![],
            prompt_embed_dim: 64,
            decoder_depth: 2,
            decoder_num_heads: 4,
            decoder_mlp_dim: 256,
            num_classes: 3,
            class_head_kernel: 3,
        }
    }

    pub fn for_variant(variant: EncoderVariant) -> Self {
        match variant {
            EncoderVariant::VitB => Self::vit_b(),
            EncoderVariant::Tiny => Self::tiny(),
        }
    }

    /// Side length of the encoder's output grid.
    pub fn grid_size(&self) -> usize {
        self.img_size / self.patch_size
    }

    /// Channels of the upscaled decoder embedding.
    pub fn upscaled_dim(&self) -> usize {
        self.prompt_embed_dim / 8
    }

    /// Shape of the added class projection: `(classes, upscaled + 1, k, k)`.
    pub fn head_shape(&self) -> [usize; 4] {
        let k = self.class_head_kernel;
        [self.num_classes, self.upscaled_dim() + 1, k, k]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.patch_size == 0 || self.img_size % self.patch_size != 0 {
            return Err(format!("img_size {} not divisible by patch_size {}", self.img_size, self.patch_size));
        }
        if self.encoder_embed_dim % self.encoder_num_heads != 0 {
            return Err("encoder_embed_dim must be divisible by encoder_num_heads".into());
        }
        if self.prompt_embed_dim % 16 != 0 {
            return Err("prompt_embed_dim must be a multiple of 16".into());
        }
        if (self.prompt_embed_dim / 2) % self.decoder_num_heads != 0 {
            return Err("prompt_embed_dim / 2 must be divisible by decoder_num_heads".into());
        }
        if self.class_head_kernel % 2 == 0 {
            return Err(format!("class_head_kernel {} must be odd", self.class_head_kernel));
        }
        if self.num_classes != 3 {
            return Err(format!("num_classes must be 3, got {}", self.num_classes));
        }
        Ok(())
    }
}
