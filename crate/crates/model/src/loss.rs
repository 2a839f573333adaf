use candle_core::Tensor;
use ndarray::ArrayView3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: logits {logits:?}, labels {labels:?}")]
    ShapeMismatch { logits: Vec<usize>, labels: Vec<usize> },
    #[error("label value {0} is not a class index")]
    InvalidLabel(u8),
    #[error("class weights must be finite and positive, got {0:?}")]
    InvalidWeights([f64; 3]),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

/// Weighted cross-entropy over logits `(B, 3, H, W)` and labels `(B, H, W)`:
/// `Σ w[y]·(−log softmax(z)[y]) / Σ w[y]` over all pixels.
pub fn weighted_cross_entropy(logits: &Tensor, labels: ArrayView3<u8>, weights: [f64; 3]) -> Result<Tensor, LossError> {
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(LossError::InvalidWeights(weights));
    }
    let (b, h, w) = labels.dim();
    if logits.dims() != [b, 3, h, w] {
        return Err(LossError::ShapeMismatch {
            logits: logits.dims().to_vec(),
            labels: labels.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut mask = vec![0f64; b * 3 * plane];
    let mut total = 0f64;
    for ((n, r, c), &y) in labels.indexed_iter() {
        if y > 2 {
            return Err(LossError::InvalidLabel(y));
        }
        mask[(n * 3 + y as usize) * plane + r * w + c] = weights[y as usize];
        total += weights[y as usize];
    }
    let mask = Tensor::from_vec(mask, (b, 3, h, w), logits.device())?.to_dtype(logits.dtype())?;
    let log_p = candle_nn::ops::log_softmax(logits, 1)?;
    let loss = ((log_p * mask)?.sum_all()? / -total)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(LossError::NonFiniteLoss);
    }
    Ok(loss)
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use ndarray::Array3;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let logits = Tensor::zeros((1, 3, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let labels = Array3::from_elem((1, 1, 1), 1u8);
        let l = weighted_cross_entropy(&logits, labels.view(), [1.0; 3]).unwrap();
        assert!((scalar(&l) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_are_near_zero_and_weights_scale_free() {
        let labels = Array3::from_shape_fn((2, 3, 3), |(n, r, c)| ((n + r + c) % 3) as u8);
        let mut z = vec![0f64; 2 * 3 * 9];
        for ((n, r, c), &y) in labels.indexed_iter() {
            z[(n * 3 + y as usize) * 9 + r * 3 + c] = 20.0;
        }
        let logits = Tensor::from_vec(z, (2, 3, 3, 3), &Device::Cpu).unwrap();
        let a = scalar(&weighted_cross_entropy(&logits, labels.view(), [0.2, 1.0, 1.0]).unwrap());
        assert!(a < 1e-3);
        let noisy = (logits.clone() * 0.05).unwrap();
        let x = scalar(&weighted_cross_entropy(&noisy, labels.view(), [0.2, 1.0, 1.0]).unwrap());
        let y = scalar(&weighted_cross_entropy(&noisy, labels.view(), [0.4, 2.0, 2.0]).unwrap());
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let logits = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let bad = Array3::from_elem((1, 2, 2), 3u8);
        assert!(matches!(
            weighted_cross_entropy(&logits, bad.view(), [1.0; 3]),
            Err(LossError::InvalidLabel(3))
        ));
        let wrong = Array3::from_elem((1, 2, 3), 0u8);
        assert!(matches!(
            weighted_cross_entropy(&logits, wrong.view(), [1.0; 3]),
            Err(LossError::ShapeMismatch { .. })
        ));
        let ok = Array3::from_elem((1, 2, 2), 0u8);
        assert!(weighted_cross_entropy(&logits, ok.view(), [0.0, 1.0, 1.0]).is_err());
        let nan = Tensor::full(f32::NAN, (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(
            weighted_cross_entropy(&nan, ok.view(), [1.0; 3]),
            Err(LossError::NonFiniteLoss)
        ));
    }
}
