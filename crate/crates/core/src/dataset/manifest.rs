//! JSON-lines slice manifests and the PNG files they point at.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, Plane, Result, SlicePair, Split};

/// One slice pair, with paths relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub label_path: String,
    pub subject_id: String,
    pub plane: Plane,
    pub index: usize,
}

/// Serialized form of one manifest line.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    image_path: String,
    label_path: String,
    subject_id: String,
    plane: Plane,
    index: usize,
    split: Split,
    seed: u64,
    build_config_hash: String,
}

/// The slice pairs of one split (of one plane, or several concatenated).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub split: Split,
    pub seed: u64,
    pub build_config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, seed: u64, build_config_hash: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            split,
            seed,
            build_config_hash: build_config_hash.into(),
            entries: Vec::new(),
        }
    }

    /// Manifest file name for one plane and split, e.g. `axial_train.jsonl`.
    pub fn file_name(plane: Plane, split: Split) -> String {
        format!("{plane}_{split}.jsonl")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            let line = ManifestLine {
                image_path: e.image_path.clone(),
                label_path: e.label_path.clone(),
                subject_id: e.subject_id.clone(),
                plane: e.plane,
                index: e.index,
                split: self.split,
                seed: self.seed,
                build_config_hash: self.build_config_hash.clone(),
            };
            serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
            out.push(b'\n');
        }
        out
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fail = |e: std::io::Error| DatasetError::ManifestWriteFailure {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(fail)?;
        }
        let mut f = fs::File::create(path).map_err(fail)?;
        f.write_all(&self.to_bytes()).map_err(fail)?;
        Ok(())
    }

    /// Read a manifest; entry paths resolve against the file's directory.
    ///
    /// An empty file carries no split field, so the split is then taken from
    /// the `<plane>_<split>.jsonl` file name.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let malformed = |reason: String| DatasetError::MalformedManifest {
            path: path.display().to_string(),
            reason,
        };
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let reader = BufReader::new(fs::File::open(path)?);
        let mut manifest: Option<DatasetManifest> = None;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: ManifestLine =
                serde_json::from_str(&line).map_err(|e| malformed(format!("line {}: {e}", n + 1)))?;
            let m = manifest.get_or_insert_with(|| {
                DatasetManifest::new(root.clone(), l.split, l.seed, l.build_config_hash.clone())
            });
            if l.split != m.split || l.seed != m.seed || l.build_config_hash != m.build_config_hash {
                return Err(malformed(format!("line {} disagrees with line 1 on split/seed/hash", n + 1)));
            }
            m.entries.push(ManifestEntry {
                image_path: l.image_path,
                label_path: l.label_path,
                subject_id: l.subject_id,
                plane: l.plane,
                index: l.index,
            });
        }
        match manifest {
            Some(m) => Ok(m),
            None => {
                let stem = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let split = stem
                    .trim_end_matches(".jsonl")
                    .rsplit('_')
                    .next()
                    .and_then(|s| s.parse::<Split>().ok())
                    .ok_or_else(|| malformed("empty manifest with no split in its name".to_string()))?;
                Ok(DatasetManifest::new(root, split, 0, String::new()))
            }
        }
    }

    /// Concatenate manifests of the same split, in the given order.
    pub fn concat(parts: &[DatasetManifest]) -> Result<DatasetManifest> {
        let first = parts.first().ok_or_else(|| DatasetError::MalformedManifest {
            path: String::new(),
            reason: "nothing to concatenate".to_string(),
        })?;
        let mut out = DatasetManifest::new(
            first.root.clone(),
            first.split,
            first.seed,
            first.build_config_hash.clone(),
        );
        for p in parts {
            if p.split != first.split || p.root != first.root {
                return Err(DatasetError::MalformedManifest {
                    path: p.root.display().to_string(),
                    reason: "cannot concatenate manifests of different splits or roots".to_string(),
                });
            }
            out.entries.extend(p.entries.iter().cloned());
        }
        Ok(out)
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    pub fn label_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.label_path)
    }

    /// Decode an entry's PNG pair; the image is scaled to `[0, 1]`.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<SlicePair> {
        let image = read_gray_png(self.image_path(entry))?.mapv(|v| v as f32 / 255.0);
        let label = read_gray_png(self.label_path(entry))?;
        if image.dim() != label.dim() {
            return Err(DatasetError::ShapeMismatch(format!(
                "{}: image {:?} vs label {:?}",
                entry.image_path,
                image.dim(),
                label.dim()
            )));
        }
        Ok(SlicePair {
            image,
            label,
            subject_id: entry.subject_id.clone(),
            plane: entry.plane,
            index: entry.index,
        })
    }
}

/// Write an 8-bit grayscale PNG; array rows become image rows.
pub fn write_gray_png(path: impl AsRef<Path>, pixels: &Array2<u8>) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().copied().collect();
    let img = GrayImage::from_raw(cols as u32, rows as u32, raw).expect("buffer matches dimensions");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| DatasetError::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_gray_png(path: impl AsRef<Path>) -> Result<Array2<u8>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| DatasetError::Image {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma buffer"))
}
