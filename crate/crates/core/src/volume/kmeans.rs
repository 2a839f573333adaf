//! Three-cluster k-means on brain voxel intensities.
//!
//! Works on the sorted multiset of nonzero intensities, so the result does
//! not depend on voxel iteration order. Clusters are ordered by centroid:
//! lowest is CSF/background, then gray matter, then white matter.

use ndarray::Array3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MapSource, ProbabilityMaps, Result, Volume3D, VolumeError};

pub const KMEANS_MAX_ITERATIONS: usize = 100;
/// Lloyd iterations stop once no centroid moves by this much.
pub const KMEANS_TOLERANCE: f64 = 1e-6;

const K: usize = 3;
const INIT_QUANTILES: [f64; K] = [0.25, 0.50, 0.75];

/// Hard k=3 tissue assignment expressed as 0/1 probability maps.
///
/// `seed` only matters when two initial percentiles coincide; the duplicate
/// slots are then re-drawn from the distinct intensities.
pub fn kmeans_tissue_prior(vol: &Volume3D, seed: u64) -> Result<ProbabilityMaps> {
    let mut values: Vec<f32> = vol.data().iter().copied().filter(|v| *v != 0.0).collect();
    values.sort_by(f32::total_cmp);

    let mut distinct: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for &v in &values {
        if distinct.last() == Some(&(v as f64)) {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            distinct.push(v as f64);
            counts.push(1.0);
        }
    }
    if distinct.len() < K {
        return Err(VolumeError::DegenerateInput(distinct.len()));
    }

    let mut centroids = initial_centroids(&values, &distinct, seed);
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = [0.0f64; K];
        let mut weights = [0.0f64; K];
        for (&v, &n) in distinct.iter().zip(&counts) {
            let c = nearest(&centroids, v);
            sums[c] += v * n;
            weights[c] += n;
        }
        let mut shift = 0.0f64;
        for c in 0..K {
            if weights[c] > 0.0 {
                let next = sums[c] / weights[c];
                shift = shift.max((next - centroids[c]).abs());
                centroids[c] = next;
            }
        }
        centroids.sort_by(f64::total_cmp);
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }

    let shape = vol.shape();
    let mut p_gm = Array3::zeros(shape);
    let mut p_wm = Array3::zeros(shape);
    for ((&v, g), w) in vol.data().iter().zip(p_gm.iter_mut()).zip(p_wm.iter_mut()) {
        if v == 0.0 {
            continue;
        }
        match nearest(&centroids, v as f64) {
            1 => *g = 1.0,
            2 => *w = 1.0,
            _ => {}
        }
    }
    ProbabilityMaps::for_volume(vol, p_gm, p_wm, MapSource::KmeansFallback)
}

fn initial_centroids(sorted: &[f32], distinct: &[f64], seed: u64) -> [f64; K] {
    let mut init = INIT_QUANTILES.map(|q| quantile(sorted, q));
    let unique_init = init.windows(2).all(|w| w[0] < w[1]);
    if !unique_init {
        // Keep the first occurrence of each value and refill the rest from
        // distinct intensities not already used.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kept: Vec<f64> = Vec::with_capacity(K);
        for v in init {
            if !kept.contains(&v) {
                kept.push(v);
            }
        }
        let pool: Vec<f64> = distinct.iter().copied().filter(|v| !kept.contains(v)).collect();
        let need = K - kept.len();
        for i in sample(&mut rng, pool.len(), need) {
            kept.push(pool[i]);
        }
        kept.sort_by(f64::total_cmp);
        init.copy_from_slice(&kept);
    }
    init
}

/// Linear-interpolated quantile of an ascending slice.
fn quantile(sorted: &[f32], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Index of the closest centroid; ties resolve to the lower index.
fn nearest(centroids: &[f64; K], v: f64) -> usize {
    let mut best = 0;
    for c in 1..K {
        if (v - centroids[c]).abs() < (v - centroids[best]).abs() {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::seq::SliceRandom;

    fn plateaus() -> Volume3D {
        // background zeros plus three intensity plateaus with noise
        let data = Array3::from_shape_fn((12, 10, 6), |(x, y, z)| {
            let jitter = ((x * 7 + y * 3 + z) % 5) as f32 * 0.2;
            match x {
                0..=2 => 0.0,
                3..=5 => 10.0 + jitter,
                6..=8 => 50.0 + jitter,
                _ => 90.0 + jitter,
            }
        });
        Volume3D::new(data, [1.0; 3], "plateau").unwrap()
    }

    #[test]
    fn separated_plateaus_map_to_csf_gm_wm() {
        let vol = plateaus();
        let maps = kmeans_tissue_prior(&vol, 0).unwrap();
        assert_eq!(maps.source(), MapSource::KmeansFallback);
        for ((x, y, z), _) in vol.data().indexed_iter() {
            let (g, w) = (maps.p_gm()[[x, y, z]], maps.p_wm()[[x, y, z]]);
            match x {
                0..=5 => assert_eq!((g, w), (0.0, 0.0)),
                6..=8 => assert_eq!((g, w), (1.0, 0.0)),
                _ => assert_eq!((g, w), (0.0, 1.0)),
            }
        }
    }

    #[test]
    fn unequal_plateau_sizes_still_find_three_clusters() {
        // 25th and 50th percentiles both land on the 10-plateau
        let data = Array3::from_shape_fn((20, 1, 1), |(x, _, _)| match x {
            0..=13 => 10.0,
            14..=16 => 50.0,
            _ => 90.0,
        });
        let vol = Volume3D::new(data, [1.0; 3], "skew").unwrap();
        for seed in 0..5 {
            let maps = kmeans_tissue_prior(&vol, seed).unwrap();
            assert_eq!(maps.p_gm()[[15, 0, 0]], 1.0);
            assert_eq!(maps.p_wm()[[19, 0, 0]], 1.0);
            assert_eq!(maps.p_gm()[[0, 0, 0]] + maps.p_wm()[[0, 0, 0]], 0.0);
        }
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let vol = Volume3D::new(Array3::from_elem((4, 4, 4), 7.0), [1.0; 3], "c").unwrap();
        assert!(matches!(
            kmeans_tissue_prior(&vol, 1),
            Err(VolumeError::DegenerateInput(1))
        ));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let vol = plateaus();
        assert_eq!(
            kmeans_tissue_prior(&vol, 9).unwrap(),
            kmeans_tissue_prior(&vol, 9).unwrap()
        );
    }

    #[test]
    fn voxel_permutation_permutes_labels() {
        let vol = plateaus();
        let flat: Vec<f32> = vol.data().iter().copied().collect();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let shuffled: Vec<f32> = order.iter().map(|&i| flat[i]).collect();
        let shuffled = Volume3D::new(
            Array3::from_shape_vec(vol.shape(), shuffled).unwrap(),
            [1.0; 3],
            "s",
        )
        .unwrap();
        let a = kmeans_tissue_prior(&vol, 0).unwrap();
        let b = kmeans_tissue_prior(&shuffled, 0).unwrap();
        let flat = |m: &Array3<f32>| m.iter().copied().collect::<Vec<_>>();
        let (a_gm, a_wm, b_gm, b_wm) = (flat(a.p_gm()), flat(a.p_wm()), flat(b.p_gm()), flat(b.p_wm()));
        for (pos, &src) in order.iter().enumerate() {
            assert_eq!(b_gm[pos], a_gm[src]);
            assert_eq!(b_wm[pos], a_wm[src]);
        }
    }
}
