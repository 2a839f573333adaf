//! Two-way transformer mask decoder with an added three-class projection.

use candle_core::{IndexOp, Module, Result, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::segment_anything::LayerNorm2d;

use crate::config::ModelConfig;
use crate::layers::{Attention, LayerNorm, Mlp, SameConv2d, Upsample2x};

/// Number of mask tokens in the original decoder; only the first is read.
const NUM_MASK_TOKENS: usize = 4;

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn_token_to_image: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_attn_image_to_token: Attention,
    skip_first_layer_pe: bool,
}

impl TwoWayBlock {
    fn new(dim: usize, heads: usize, mlp_dim: usize, skip_first_layer_pe: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(dim, heads, 1, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            cross_attn_token_to_image: Attention::new(dim, heads, 2, vb.pp("cross_attn_token_to_image"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            mlp: Mlp::new(&[dim, mlp_dim, dim], &["lin1", "lin2"], vb.pp("mlp"))?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            norm4: LayerNorm::new(dim, 1e-5, vb.pp("norm4"))?,
            cross_attn_image_to_token: Attention::new(dim, heads, 2, vb.pp("cross_attn_image_to_token"))?,
            skip_first_layer_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.cross_attn_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let keys = (keys + self.cross_attn_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

#[derive(Debug, Clone)]
struct TwoWayTransformer {
    layers: Vec<TwoWayBlock>,
    final_attn_token_to_image: Attention,
    norm_final_attn: LayerNorm,
}

impl TwoWayTransformer {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.prompt_embed_dim;
        let layers = (0..cfg.decoder_depth)
            .map(|i| {
                TwoWayBlock::new(dim, cfg.decoder_num_heads, cfg.decoder_mlp_dim, i == 0, vb.pp("layers").pp(i))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_attn_token_to_image: Attention::new(dim, cfg.decoder_num_heads, 2, vb.pp("final_attn_token_to_image"))?,
            norm_final_attn: LayerNorm::new(dim, 1e-5, vb.pp("norm_final_attn"))?,
        })
    }

    /// `image` and `image_pe` are `(B, C, H, W)`; `tokens` is `(B, N, C)`.
    fn forward(&self, image: &Tensor, image_pe: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let keys0 = image.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let key_pe = image_pe.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let mut queries = tokens.clone();
        let mut keys = keys0;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, &key_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = (&keys + &key_pe)?;
        let queries = (&queries + self.final_attn_token_to_image.forward(&q, &k, &keys)?)?;
        Ok((self.norm_final_attn.forward(&queries)?, keys))
    }
}

#[derive(Debug)]
pub(crate) struct MaskDecoder {
    iou_token: Tensor,
    mask_tokens: Tensor,
    transformer: TwoWayTransformer,
    upscale1: Upsample2x,
    upscale_norm: LayerNorm2d,
    upscale2: Upsample2x,
    hypernetwork: Mlp,
    class_head: SameConv2d,
    dim: usize,
}

pub(crate) const CLASS_HEAD_PREFIX: &str = "mask_decoder.class_head.";

impl MaskDecoder {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let dim = cfg.prompt_embed_dim;
        let up = cfg.upscaled_dim();
        let hyper = vb.pp("output_hypernetworks_mlps").pp(0).pp("layers");
        Ok(Self {
            iou_token: vb.pp("iou_token").get((1, dim), "weight")?,
            mask_tokens: vb.pp("mask_tokens").get((NUM_MASK_TOKENS, dim), "weight")?,
            transformer: TwoWayTransformer::new(cfg, vb.pp("transformer"))?,
            upscale1: Upsample2x::new(dim, dim / 4, vb.pp("output_upscaling.0"))?,
            upscale_norm: LayerNorm2d::new(dim / 4, 1e-6, vb.pp("output_upscaling.1"))?,
            upscale2: Upsample2x::new(dim / 4, up, vb.pp("output_upscaling.3"))?,
            hypernetwork: Mlp::new(&[dim, dim, dim, up], &["0", "1", "2"], hyper)?,
            class_head: SameConv2d::new(up + 1, cfg.num_classes, cfg.class_head_kernel, vb.pp("class_head"))?,
            dim,
        })
    }

    /// Class logits at four times the embedding resolution, `(B, 3, 4H, 4W)`.
    pub fn forward(&self, embeddings: &Tensor, image_pe: &Tensor, sparse: &Tensor, dense: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = embeddings.dims4()?;
        let output_tokens = Tensor::cat(&[&self.iou_token, &self.mask_tokens], 0)?
            .unsqueeze(0)?
            .broadcast_as((b, 1 + NUM_MASK_TOKENS, self.dim))?;
        let tokens = Tensor::cat(&[&output_tokens.contiguous()?, sparse], 1)?;
        let src = (embeddings + dense)?;
        let pos = image_pe.broadcast_as(src.shape())?;
        let (hs, src) = self.transformer.forward(&src, &pos, &tokens)?;

        let src = src.transpose(1, 2)?.reshape((b, self.dim, h, w))?;
        let upscaled = self
            .upscale1
            .forward(&src)?
            .apply(&self.upscale_norm)?
            .gelu_erf()?
            .apply(&self.upscale2)?
            .gelu_erf()?;
        let (_, c, uh, uw) = upscaled.dims4()?;
        let hyper = self.hypernetwork.forward(&hs.i((.., 1, ..))?)?;
        let mask = hyper
            .unsqueeze(1)?
            .matmul(&upscaled.reshape((b, c, uh * uw))?)?
            .reshape((b, 1, uh, uw))?;
        Tensor::cat(&[&upscaled, &mask], 1)?.apply(&self.class_head)
    }
}
