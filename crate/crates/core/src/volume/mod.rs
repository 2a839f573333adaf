//! Loading 3D MRI volumes, driving the external brain-extraction and
//! tissue-classification tools, and a k-means fallback pseudo-labeler for
//! machines without those tools installed.

mod kmeans;
mod tools;

use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3, Order, Zip};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions, writer::WriterOptions};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans_tissue_prior, KMEANS_MAX_ITERATIONS, KMEANS_TOLERANCE};
pub use tools::{
    resolve_executable, run_brain_extraction, FSL_DIR_ENV, run_tissue_segmentation,
    run_tissue_segmentation_with, TissueOutputs, ToolConfig,
};

/// Slack allowed on `p_gm + p_wm <= 1`.
pub const PROBABILITY_SUM_EPS: f32 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("volume file not found: {0}")]
    MissingFile(PathBuf),
    #[error("corrupt NIfTI file {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("volume `{0}` contains NaN or infinite intensities")]
    NonFiniteData(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("external tool not found: {0}")]
    ToolNotFound(String),
    #[error("external tool `{tool}` failed: {reason}")]
    ToolFailure { tool: String, reason: String },
    #[error("external tool `{tool}` timed out after {seconds} s")]
    Timeout { tool: String, seconds: f64 },
    #[error("probability maps rejected: {0}")]
    MapShapeMismatch(String),
    #[error("k-means needs at least 3 distinct nonzero intensities, found {0}")]
    DegenerateInput(usize),
    #[error("invalid intensity range: low {low} > high {high}")]
    InvalidRange { low: f32, high: f32 },
    #[error("failed to write {path}: {reason}")]
    WriteFailure { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// One subject scan: a 3D intensity grid indexed `[x, y, z]`.
#[derive(Debug, Clone)]
pub struct Volume3D {
    data: Array3<f32>,
    spacing: [f32; 3],
    subject_id: String,
    header: Option<Box<NiftiHeader>>,
}

impl Volume3D {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], subject_id: impl Into<String>) -> Result<Self> {
        let subject_id = subject_id.into();
        if data.shape().iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidVolume(format!(
                "shape {:?} has an empty axis",
                data.shape()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidVolume(format!(
                "voxel spacing {spacing:?} must be positive"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteData(subject_id));
        }
        Ok(Self {
            data,
            spacing,
            subject_id,
            header: None,
        })
    }

    /// Same geometry and subject, different voxel values.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(VolumeError::InvalidVolume(format!(
                "shape {:?} differs from source {:?}",
                data.shape(),
                self.data.shape()
            )));
        }
        let mut out = Self::new(data, self.spacing, self.subject_id.clone())?;
        out.header = self.header.clone();
        Ok(out)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn header(&self) -> Option<&NiftiHeader> {
        self.header.as_deref()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

/// Where a set of tissue probability maps came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    ExternalFast,
    KmeansFallback,
}

/// Per-voxel gray- and white-matter probabilities aligned to a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMaps {
    p_gm: Array3<f32>,
    p_wm: Array3<f32>,
    source: MapSource,
}

impl ProbabilityMaps {
    /// Validates ranges and the `p_gm + p_wm <= 1 + eps` bound.
    pub fn new(p_gm: Array3<f32>, p_wm: Array3<f32>, source: MapSource) -> Result<Self> {
        if p_gm.dim() != p_wm.dim() {
            return Err(VolumeError::MapShapeMismatch(format!(
                "gray matter map {:?} vs white matter map {:?}",
                p_gm.shape(),
                p_wm.shape()
            )));
        }
        let mut bad = None;
        Zip::indexed(&p_gm).and(&p_wm).for_each(|idx, &g, &w| {
            if bad.is_some() {
                return;
            }
            let in_range = |p: f32| (0.0..=1.0).contains(&p);
            if !in_range(g) || !in_range(w) {
                bad = Some(format!("voxel {idx:?} has p_gm={g}, p_wm={w} outside [0, 1]"));
            } else if g + w > 1.0 + PROBABILITY_SUM_EPS {
                bad = Some(format!("voxel {idx:?} has p_gm + p_wm = {} > 1", g + w));
            }
        });
        if let Some(reason) = bad {
            return Err(VolumeError::MapShapeMismatch(reason));
        }
        Ok(Self { p_gm, p_wm, source })
    }

    /// Validates as [`ProbabilityMaps::new`] and additionally requires the
    /// maps to match `vol`'s shape.
    pub fn for_volume(
        vol: &Volume3D,
        p_gm: Array3<f32>,
        p_wm: Array3<f32>,
        source: MapSource,
    ) -> Result<Self> {
        if p_gm.dim() != vol.shape() {
            return Err(VolumeError::MapShapeMismatch(format!(
                "maps {:?} do not match volume {:?}",
                p_gm.shape(),
                vol.data().shape()
            )));
        }
        Self::new(p_gm, p_wm, source)
    }

    pub fn p_gm(&self) -> &Array3<f32> {
        &self.p_gm
    }

    pub fn p_wm(&self) -> &Array3<f32> {
        &self.p_wm
    }

    pub fn source(&self) -> MapSource {
        self.source
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.p_gm.dim()
    }
}

/// Subject identifier from a file name: the name minus `.nii` / `.nii.gz`.
pub fn subject_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or(name)
}

/// True for `.nii` and `.nii.gz` file names.
pub fn is_nifti_path(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Read a plain or gzip-compressed NIfTI-1 volume.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let (data, header) = read_array(path)?;
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]];
    let spacing = spacing.map(|s| if s.is_finite() && s > 0.0 { s } else { 1.0 });
    let mut vol = Volume3D::new(data, spacing, subject_id_from_path(path)).map_err(|e| match e {
        VolumeError::InvalidVolume(reason) => VolumeError::CorruptHeader {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    vol.header = Some(Box::new(header));
    Ok(vol)
}

fn read_array(path: &Path) -> Result<(Array3<f32>, NiftiHeader)> {
    if !path.is_file() {
        return Err(VolumeError::MissingFile(path.to_path_buf()));
    }
    let corrupt = |reason: String| VolumeError::CorruptHeader {
        path: path.to_path_buf(),
        reason,
    };
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| corrupt(e.to_string()))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(|e| corrupt(e.to_string()))?;
    // Trailing singleton dimensions (e.g. a 4D file with one frame) are dropped.
    let mut shape: Vec<usize> = arr.shape().to_vec();
    while shape.len() > 3 && shape.last() == Some(&1) {
        shape.pop();
    }
    while shape.len() < 3 {
        shape.push(1);
    }
    // The reader hands back column-major data, so reshape in that order.
    let arr = arr
        .into_shape_with_order((shape, Order::ColumnMajor))
        .map_err(|e| corrupt(e.to_string()))?
        .into_dimensionality::<Ix3>()
        .map_err(|_| corrupt("expected a 3D volume".to_string()))?;
    Ok((arr.as_standard_layout().into_owned(), header))
}

/// Write a volume as float32 NIfTI (gzip when the path ends in `.gz`).
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_array(vol.data(), vol.spacing(), vol.header(), path.as_ref())
}

/// Write a pair of probability maps next to each other as float32 NIfTI.
pub fn write_maps(
    maps: &ProbabilityMaps,
    like: &Volume3D,
    gm_path: impl AsRef<Path>,
    wm_path: impl AsRef<Path>,
) -> Result<()> {
    write_array(maps.p_gm(), like.spacing(), like.header(), gm_path.as_ref())?;
    write_array(maps.p_wm(), like.spacing(), like.header(), wm_path.as_ref())
}

/// Read a pair of probability maps written by [`write_maps`] or a tool.
pub fn load_maps(
    gm_path: impl AsRef<Path>,
    wm_path: impl AsRef<Path>,
    source: MapSource,
) -> Result<ProbabilityMaps> {
    let (gm, _) = read_array(gm_path.as_ref())?;
    let (wm, _) = read_array(wm_path.as_ref())?;
    ProbabilityMaps::new(gm, wm, source)
}

fn write_array(
    data: &Array3<f32>,
    spacing: [f32; 3],
    reference: Option<&NiftiHeader>,
    path: &Path,
) -> Result<()> {
    let mut header = reference.cloned().unwrap_or_default();
    header.pixdim[1] = spacing[0];
    header.pixdim[2] = spacing[1];
    header.pixdim[3] = spacing[2];
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(data)
        .map_err(|e| VolumeError::WriteFailure {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Voxels with `low <= intensity < high`.
pub fn intensity_threshold_mask(vol: &Volume3D, low: f32, high: f32) -> Result<Array3<bool>> {
    if low.is_nan() || high.is_nan() || low > high {
        return Err(VolumeError::InvalidRange { low, high });
    }
    Ok(vol.data().mapv(|v| low <= v && v < high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(shape: (usize, usize, usize)) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(x, y, z)| (x * 100 + y * 10 + z) as f32 + 0.25)
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume3D::new(ramp((8, 8, 8)), [1.0, 1.2, 0.9], "sub-01").unwrap();
        for name in ["sub-01.nii", "sub-01.nii.gz"] {
            let path = dir.path().join(name);
            write_volume(&vol, &path).unwrap();
            let back = load_volume(&path).unwrap();
            assert_eq!(back.data(), vol.data());
            assert_eq!(back.spacing(), vol.spacing());
            assert_eq!(back.subject_id(), "sub-01");
        }
    }

    #[test]
    fn anisotropic_shape_keeps_axis_order() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume3D::new(ramp((3, 5, 7)), [1.0; 3], "a").unwrap();
        let path = dir.path().join("a.nii.gz");
        write_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.shape(), (3, 5, 7));
        assert_eq!(back.data()[[2, 4, 6]], vol.data()[[2, 4, 6]]);
    }

    #[test]
    fn nan_voxels_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = ramp((4, 4, 4));
        data[[1, 2, 3]] = f32::NAN;
        // bypass the constructor check to put a NaN on disk
        write_array(&data, [1.0; 3], None, &dir.path().join("bad.nii")).unwrap();
        let err = load_volume(dir.path().join("bad.nii")).unwrap_err();
        assert!(matches!(err, VolumeError::NonFiniteData(id) if id == "bad"));
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_volume(dir.path().join("nope.nii")),
            Err(VolumeError::MissingFile(_))
        ));
        let junk = dir.path().join("junk.nii");
        std::fs::write(&junk, b"definitely not a nifti header").unwrap();
        assert!(matches!(
            load_volume(&junk),
            Err(VolumeError::CorruptHeader { .. })
        ));
    }

    #[test]
    fn subject_ids_strip_nifti_extensions() {
        assert_eq!(subject_id_from_path(Path::new("/x/IXI002-Guys-0828-T1.nii.gz")), "IXI002-Guys-0828-T1");
        assert_eq!(subject_id_from_path(Path::new("s.nii")), "s");
        assert!(is_nifti_path(Path::new("a.nii.gz")));
        assert!(!is_nifti_path(Path::new("a.png")));
    }

    #[test]
    fn probability_maps_validate_sum_and_shape() {
        let ok = Array3::from_elem((2, 2, 2), 0.5f32);
        assert!(ProbabilityMaps::new(ok.clone(), ok.clone(), MapSource::ExternalFast).is_ok());
        let over = Array3::from_elem((2, 2, 2), 0.6f32);
        assert!(matches!(
            ProbabilityMaps::new(over.clone(), over, MapSource::ExternalFast),
            Err(VolumeError::MapShapeMismatch(_))
        ));
        let small = Array3::zeros((2, 2, 1));
        assert!(matches!(
            ProbabilityMaps::new(ok.clone(), small, MapSource::ExternalFast),
            Err(VolumeError::MapShapeMismatch(_))
        ));
        let neg = Array3::from_elem((2, 2, 2), -0.1f32);
        assert!(ProbabilityMaps::new(neg, ok, MapSource::ExternalFast).is_err());
    }

    #[test]
    fn threshold_mask_edge_cases() {
        let vol = Volume3D::new(ramp((3, 3, 3)), [1.0; 3], "t").unwrap();
        let all = intensity_threshold_mask(&vol, 0.0, f32::INFINITY).unwrap();
        assert!(all.iter().all(|b| *b));
        let none = intensity_threshold_mask(&vol, 10.25, 10.25).unwrap();
        assert!(none.iter().all(|b| !*b));
        assert!(matches!(
            intensity_threshold_mask(&vol, 2.0, 1.0),
            Err(VolumeError::InvalidRange { .. })
        ));
    }

    #[test]
    fn constructor_rejects_empty_axis_and_bad_spacing() {
        assert!(Volume3D::new(Array3::zeros((0, 2, 2)), [1.0; 3], "e").is_err());
        assert!(Volume3D::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0], "e").is_err());
    }
}
