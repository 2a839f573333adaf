//! Deterministic phantoms for tests and desk-scale demo runs: nested
//! ellipsoids in 3D, nested ellipses in 2D, with white matter at the core,
//! gray matter around it and a faint outer rim.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{MapSource, ProbabilityMaps, Result, Volume3D};
use crate::{GRAY_MATTER, WHITE_MATTER};

const WM_INTENSITY: f32 = 0.9;
const GM_INTENSITY: f32 = 0.55;
const RIM_INTENSITY: f32 = 0.2;

/// A head-like volume plus the one-hot tissue maps it was drawn from.
pub fn phantom_subject(subject_id: &str, shape: (usize, usize, usize), seed: u64) -> Result<(Volume3D, ProbabilityMaps)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: [f32; 3] = [shape.0, shape.1, shape.2].map(|n| n as f32 / 2.0 + rng.random_range(-0.5..0.5));
    let radii: [f32; 3] = [shape.0, shape.1, shape.2].map(|n| n as f32 * rng.random_range(0.36..0.44));
    let wm_frac = rng.random_range(0.45..0.6);
    let gm_frac = rng.random_range(0.8..0.88);

    let mut data = Array3::<f32>::zeros(shape);
    let mut gm = Array3::<f32>::zeros(shape);
    let mut wm = Array3::<f32>::zeros(shape);
    for ((x, y, z), v) in data.indexed_iter_mut() {
        let r = ((x as f32 - center[0]) / radii[0]).powi(2)
            + ((y as f32 - center[1]) / radii[1]).powi(2)
            + ((z as f32 - center[2]) / radii[2]).powi(2);
        let r = r.sqrt();
        let noise = rng.random_range(-0.03..0.03);
        *v = if r < wm_frac {
            wm[[x, y, z]] = 1.0;
            WM_INTENSITY + noise
        } else if r < gm_frac {
            gm[[x, y, z]] = 1.0;
            GM_INTENSITY + noise
        } else if r < 1.0 {
            RIM_INTENSITY + noise
        } else {
            0.0
        };
    }
    let vol = Volume3D::new(data, [1.0; 3], subject_id)?;
    let maps = ProbabilityMaps::for_volume(&vol, gm, wm, MapSource::ExternalFast)?;
    Ok((vol, maps))
}

/// A 2D slice of nested ellipses with its label, image in `[0, 1]`.
pub fn geometric_slice(size: usize, seed: u64) -> (Array2<f32>, Array2<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let (cy, cx) = (s * rng.random_range(0.4..0.6), s * rng.random_range(0.4..0.6));
    let (ry, rx) = (s * rng.random_range(0.25..0.38), s * rng.random_range(0.25..0.38));
    let wm_frac = rng.random_range(0.4..0.6);
    let mut image = Array2::<f32>::zeros((size, size));
    let mut label = Array2::<u8>::zeros((size, size));
    for ((r, c), v) in image.indexed_iter_mut() {
        let d = (((r as f32 + 0.5 - cy) / ry).powi(2) + ((c as f32 + 0.5 - cx) / rx).powi(2)).sqrt();
        if d < wm_frac {
            *v = WM_INTENSITY;
            label[[r, c]] = WHITE_MATTER;
        } else if d < 1.0 {
            *v = GM_INTENSITY;
            label[[r, c]] = GRAY_MATTER;
        }
    }
    (image, label)
}
