//! Building blocks written with differentiable primitives only, so that
//! gradients flow through every trainable path.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Linear, VarBuilder};

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get(dim, "weight")?,
            bias: vb.get(dim, "bias")?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let xs = xs.broadcast_sub(&mean)?;
        let var = xs.sqr()?.mean_keepdim(D::Minus1)?;
        xs.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Multi-head attention with an optional internal downsampling of the
/// channel dimension.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    num_heads: usize,
}

impl Attention {
    pub fn new(dim: usize, num_heads: usize, downsample: usize, vb: VarBuilder) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q_proj: candle_nn::linear(dim, inner, vb.pp("q_proj"))?,
            k_proj: candle_nn::linear(dim, inner, vb.pp("k_proj"))?,
            v_proj: candle_nn::linear(dim, inner, vb.pp("v_proj"))?,
            out_proj: candle_nn::linear(inner, dim, vb.pp("out_proj"))?,
            num_heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        x.reshape((b, n, self.num_heads, c / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let (b, h, n, c) = q.dims4()?;
        let attn = (q.matmul(&k.t()?.contiguous()?)? / (c as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        attn.matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, n, h * c))?
            .apply(&self.out_proj)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], names: &[&str], vb: VarBuilder) -> Result<Self> {
        let layers = dims
            .windows(2)
            .zip(names)
            .map(|(w, name)| candle_nn::linear(w[0], w[1], vb.pp(*name)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut xs = xs.clone();
        for (i, l) in self.layers.iter().enumerate() {
            xs = l.forward(&xs)?;
            if i + 1 < self.layers.len() {
                xs = xs.relu()?;
            }
        }
        Ok(xs)
    }
}

/// Transposed convolution with kernel 2 and stride 2, stored PyTorch style
/// as `(in, out, 2, 2)`, computed as a single matmul.
#[derive(Debug, Clone)]
pub(crate) struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
}

impl Upsample2x {
    pub fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get((cin, cout, 2, 2), "weight")?,
            bias: vb.get(cout, "bias")?,
            out_channels: cout,
        })
    }
}

impl Module for Upsample2x {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = xs.dims4()?;
        let o = self.out_channels;
        let x = xs.permute((0, 2, 3, 1))?.reshape((b * h * w, cin))?;
        let k = self.weight.reshape((cin, o * 4))?;
        x.matmul(&k)?
            .reshape((b, h, w, o, 2, 2))?
            .permute((0, 3, 1, 4, 2, 5))?
            .reshape((b, o, 2 * h, 2 * w))?
            .broadcast_add(&self.bias.reshape((1, o, 1, 1))?)
    }
}

/// 2D convolution with a square kernel, stride 1 and "same" padding.
#[derive(Debug, Clone)]
pub(crate) struct SameConv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl SameConv2d {
    pub fn new(cin: usize, cout: usize, k: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            weight: vb.get((cout, cin, k, k), "weight")?,
            bias: vb.get(cout, "bias")?,
            padding: k / 2,
        })
    }
}

impl Module for SameConv2d {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let cout = self.bias.dim(0)?;
        let ys = if self.padding == 0 {
            // pointwise: a plain matmul over channels is much faster on CPU
            let (b, cin, h, w) = xs.dims4()?;
            self.weight
                .reshape((cout, cin))?
                .broadcast_matmul(&xs.reshape((b, cin, h * w))?)?
                .reshape((b, cout, h, w))?
        } else {
            xs.conv2d(&self.weight, self.padding, 1, 1, 1)?
        };
        ys.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)
    }
}

/// Bilinear resize of the two trailing axes as `R_rows · X · R_colsᵀ`.
pub(crate) fn resize_bilinear(xs: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    if (h, w) == (rows, cols) {
        return Ok(xs.clone());
    }
    let matrix = |src: usize, dst: usize| -> Result<Tensor> {
        let m = brainseg_core::resample::interpolation_matrix(src, dst);
        let data: Vec<f64> = m.iter().copied().collect();
        Tensor::from_vec(data, (dst, src), xs.device())?.to_dtype(xs.dtype())
    };
    let r = matrix(h, rows)?;
    let c = matrix(w, cols)?.t()?.contiguous()?;
    r.broadcast_matmul(xs)?.broadcast_matmul(&c)
}
