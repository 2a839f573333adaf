//! Box-prompt encoder: random Fourier positional encoding of the box
//! corners plus learned corner embeddings, and a learned dense embedding
//! standing in for the absent mask prompt.

use std::f64::consts::PI;

use brainseg_core::PromptSpec;
use candle_core::{Device, Result, Tensor, D};
use candle_nn::VarBuilder;

#[derive(Debug, Clone)]
pub(crate) struct PromptEncoder {
    /// Frozen `(2, dim / 2)` Gaussian projection.
    gaussian: Tensor,
    point_embeddings: Vec<Tensor>,
    /// Kept for checkpoint compatibility; boxes never need padding points.
    _not_a_point: Tensor,
    no_mask: Tensor,
    dim: usize,
    grid: usize,
    input_size: usize,
}

impl PromptEncoder {
    pub fn new(dim: usize, grid: usize, input_size: usize, gaussian: Tensor, vb: VarBuilder) -> Result<Self> {
        let point_embeddings = (0..4)
            .map(|i| vb.pp("point_embeddings").pp(i).get((1, dim), "weight"))
            .collect::<Result<_>>()?;
        Ok(Self {
            gaussian,
            point_embeddings,
            _not_a_point: vb.pp("not_a_point_embed").get((1, dim), "weight")?,
            no_mask: vb.pp("no_mask_embed").get((1, dim), "weight")?,
            dim,
            grid,
            input_size,
        })
    }

    /// Encode coordinates in `[0, 1]`, shaped `(..., 2)`, to `(..., dim)`.
    fn encode(&self, coords: &Tensor) -> Result<Tensor> {
        let coords = ((coords * 2.0)? - 1.0)?;
        let proj = (coords.broadcast_matmul(&self.gaussian)? * (2.0 * PI))?;
        Tensor::cat(&[proj.sin()?, proj.cos()?], D::Minus1)
    }

    /// Positional encoding of the image grid, `(1, dim, grid, grid)`.
    pub fn dense_pe(&self, device: &Device) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for r in 0..g {
            for c in 0..g {
                coords.push((c as f32 + 0.5) / g as f32);
                coords.push((r as f32 + 0.5) / g as f32);
            }
        }
        let coords = Tensor::from_vec(coords, (g, g, 2), device)?.to_dtype(self.gaussian.dtype())?;
        self.encode(&coords)?.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()
    }

    /// Sparse box embeddings `(B, 2, dim)` and dense embeddings `(B, dim, grid, grid)`.
    pub fn forward(&self, boxes: &[PromptSpec], device: &Device) -> Result<(Tensor, Tensor)> {
        let s = self.input_size as f32;
        let mut coords = Vec::with_capacity(boxes.len() * 4);
        for b in boxes {
            // pixel-center convention, then back to the unit square
            for v in [b.x0, b.y0, b.x1, b.y1] {
                coords.push((v * s + 0.5) / s);
            }
        }
        let n = boxes.len();
        let coords = Tensor::from_vec(coords, (n, 2, 2), device)?.to_dtype(self.gaussian.dtype())?;
        let pe = self.encode(&coords)?;
        let corners = Tensor::cat(&[&self.point_embeddings[2], &self.point_embeddings[3]], 0)?;
        let sparse = pe.broadcast_add(&corners.unsqueeze(0)?)?;
        let dense = self
            .no_mask
            .reshape((1, self.dim, 1, 1))?
            .broadcast_as((n, self.dim, self.grid, self.grid))?;
        Ok((sparse, dense))
    }
}

pub(crate) fn gaussian_shape(dim: usize) -> (usize, usize) {
    (2, dim / 2)
}

pub(crate) const GAUSSIAN_KEY: &str = "prompt_encoder.pe_layer.positional_encoding_gaussian_matrix";

