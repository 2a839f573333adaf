//! Bilinear resampling with half-pixel centers.
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * src / dst - 0.5`,
//! clamped to the valid range. Equal sizes reproduce the input exactly.

use ndarray::{Array2, ArrayView2};

/// One output sample expressed as a blend of two source indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

/// Interpolation taps mapping a 1D axis of length `src` onto `dst` samples.
pub fn taps(src: usize, dst: usize) -> Vec<Tap> {
    assert!(src > 0 && dst > 0, "axis lengths must be positive");
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: x - lo as f64,
            }
        })
        .collect()
}

/// Dense `dst x src` interpolation matrix for one axis, so that
/// `resized = R_rows * image * R_cols^T`.
pub fn interpolation_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    for (i, t) in taps(src, dst).into_iter().enumerate() {
        m[[i, t.lo]] += 1.0 - t.frac;
        m[[i, t.hi]] += t.frac;
    }
    m
}

/// Bilinearly resize a 2D array to `rows x cols`.
pub fn bilinear(src: ArrayView2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (rows, cols) {
        return src.to_owned();
    }
    let ty = taps(h, rows);
    let tx = taps(w, cols);
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let (a, b) = (ty[r], tx[c]);
        let top = src[[a.lo, b.lo]] as f64 * (1.0 - b.frac) + src[[a.lo, b.hi]] as f64 * b.frac;
        let bottom = src[[a.hi, b.lo]] as f64 * (1.0 - b.frac) + src[[a.hi, b.hi]] as f64 * b.frac;
        (top * (1.0 - a.frac) + bottom * a.frac) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_when_sizes_match() {
        let a = Array2::from_shape_fn((5, 7), |(r, c)| (r * 7 + c) as f32 * 0.37);
        assert_eq!(bilinear(a.view(), 5, 7), a);
        let m = interpolation_matrix(6, 6);
        assert_eq!(m, Array2::<f64>::eye(6));
    }

    #[test]
    fn upsample_two_to_four_matches_hand_values() {
        // source coords for dst=4 from src=2: -0.25(clamped 0), 0.25, 0.75, 1.25(clamped 1)
        let t = taps(2, 4);
        let fr: Vec<f64> = t.iter().map(|t| t.frac).collect();
        assert_eq!(fr, vec![0.0, 0.25, 0.75, 0.0]);
        let a = array![[0.0f32, 1.0], [1.0, 0.0]];
        let out = bilinear(a.view(), 4, 4);
        // pixel (1,1): rows 0.25 / cols 0.25 blend of the checkerboard
        let expect = 0.75 * (0.75 * 0.0 + 0.25 * 1.0) + 0.25 * (0.75 * 1.0 + 0.25 * 0.0);
        assert!((out[[1, 1]] as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn matrix_rows_sum_to_one() {
        let m = interpolation_matrix(17, 64);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
