//! Slicing volumes along the three anatomical planes, turning tissue
//! probability maps into three-class label masks, and assembling
//! subject-disjoint train/val/test slice datasets.

mod build;
mod manifest;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::resample;
use crate::volume::VolumeError;
use crate::{BACKGROUND, GRAY_MATTER, WHITE_MATTER};

pub use build::{build_dataset, build_subject_slices, ManifestSet};
pub use manifest::{read_gray_png, write_gray_png, DatasetManifest, ManifestEntry};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot resize an empty slice")]
    EmptySlice,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate subject ids: {0:?}")]
    DuplicateIds(Vec<String>),
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("invalid build config: {0}")]
    InvalidConfig(String),
    #[error("failed to write manifest {path}: {reason}")]
    ManifestWriteFailure { path: String, reason: String },
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: String, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// Anatomical slicing plane. Volumes are indexed `[x, y, z]`; axial slices
/// fix `z`, coronal fix `y`, sagittal fix `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Volume axis held fixed by this plane.
    pub fn axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(format!("unknown plane `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub target_resolution: usize,
    /// Probability a tissue class must strictly exceed to be labeled.
    pub threshold: f32,
    /// Minimum share of GM+WM pixels for a slice to be kept.
    pub min_tissue_fraction: f64,
    pub planes: Vec<Plane>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            target_resolution: 256,
            threshold: 0.5,
            min_tissue_fraction: 0.01,
            planes: Plane::ALL.to_vec(),
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DatasetError::InvalidConfig(msg));
        if self.target_resolution < 16 {
            return bad(format!("target_resolution {} < 16", self.target_resolution));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if !(0.0..1.0).contains(&self.min_tissue_fraction) {
            return bad(format!(
                "min_tissue_fraction {} outside [0, 1)",
                self.min_tissue_fraction
            ));
        }
        if self.planes.is_empty() {
            return bad("no planes selected".to_string());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("build config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A resized grayscale slice and its three-class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    /// Normalized to `[0, 1]`.
    pub image: Array2<f32>,
    /// Values in `{0, 1, 2}`.
    pub label: Array2<u8>,
    pub subject_id: String,
    pub plane: Plane,
    pub index: usize,
}

/// All 2D slices along `plane`, in ascending index order.
pub fn extract_slices<T: Clone>(vol: &Array3<T>, plane: Plane) -> Vec<Array2<T>> {
    vol.axis_iter(Axis(plane.axis()))
        .map(|s| s.to_owned())
        .collect()
}

/// Inverse of [`extract_slices`].
pub fn restack_slices<T: Clone>(slices: &[Array2<T>], plane: Plane) -> Result<Array3<T>> {
    let views: Vec<ArrayView2<T>> = slices.iter().map(|s| s.view()).collect();
    ndarray::stack(Axis(plane.axis()), &views)
        .map_err(|e| DatasetError::ShapeMismatch(e.to_string()))
}

/// Bilinear resize to `target x target`.
pub fn resize_to_grid(slice: ArrayView2<f32>, target: usize) -> Result<Array2<f32>> {
    if slice.is_empty() || target == 0 {
        return Err(DatasetError::EmptySlice);
    }
    Ok(resample::bilinear(slice, target, target))
}

/// Bilinear resize of a probability slice; output stays within `[0, 1]`.
pub fn resize_probability(slice: ArrayView2<f32>, target: usize) -> Result<Array2<f32>> {
    Ok(resize_to_grid(slice, target)?.mapv(|p| p.clamp(0.0, 1.0)))
}

/// Per-slice min-max scaling to `[0, 1]`; constant slices become all zero.
pub fn normalize_slice(slice: ArrayView2<f32>) -> Array2<f32> {
    let (lo, hi) = slice
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Array2::zeros(slice.raw_dim());
    }
    let span = hi - lo;
    slice.mapv(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

/// Combine GM/WM probability slices into a label mask.
///
/// GM is written first where `p_gm > threshold`, then WM where
/// `p_wm > threshold`, so WM wins when both exceed it.
pub fn fuse_mask(p_gm: ArrayView2<f32>, p_wm: ArrayView2<f32>, threshold: f32) -> Result<Array2<u8>> {
    if p_gm.dim() != p_wm.dim() {
        return Err(DatasetError::ShapeMismatch(format!(
            "p_gm {:?} vs p_wm {:?}",
            p_gm.dim(),
            p_wm.dim()
        )));
    }
    let mut label = Array2::from_elem(p_gm.raw_dim(), BACKGROUND);
    ndarray::Zip::from(&mut label)
        .and(p_gm)
        .and(p_wm)
        .for_each(|l, &g, &w| {
            if g > threshold {
                *l = GRAY_MATTER;
            }
            if w > threshold {
                *l = WHITE_MATTER;
            }
        });
    Ok(label)
}

/// Whether at least `min_tissue_fraction` of the pixels are GM or WM.
pub fn is_informative(label: ArrayView2<u8>, min_tissue_fraction: f64) -> bool {
    let total = label.len();
    if total == 0 {
        return false;
    }
    let tissue = label
        .iter()
        .filter(|&&l| l == GRAY_MATTER || l == WHITE_MATTER)
        .count();
    tissue as f64 / total as f64 >= min_tissue_fraction
}

/// Subject ids assigned to each split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SubjectSplits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, subject: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.get(*s).iter().any(|id| id == subject))
    }
}

/// Seeded subject-level split.
///
/// Ids are sorted, then shuffled with the seed, so the outcome depends only
/// on the id set. Train and val take `floor(n * fraction)`; test gets the
/// remainder.
pub fn split_subjects(ids: &[String], fractions: (f64, f64, f64), seed: u64) -> Result<SubjectSplits> {
    let (f_train, f_val, f_test) = fractions;
    let all = [f_train, f_val, f_test];
    if all.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidFractions(all));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let dups: Vec<String> = sorted
        .windows(2)
        .filter(|w| w[0] == w[1])
        .map(|w| w[0].clone())
        .collect();
    if !dups.is_empty() {
        return Err(DatasetError::DuplicateIds(dups));
    }
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = sorted.len() as f64;
    // small slack so that e.g. 10 * 0.7 does not floor to 6
    let n_train = (n * f_train + 1e-9).floor() as usize;
    let n_val = (n * f_val + 1e-9).floor() as usize;
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(SubjectSplits {
        train: sorted,
        val,
        test,
    })
}
