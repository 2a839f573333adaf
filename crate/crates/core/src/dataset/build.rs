use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::{
    extract_slices, fuse_mask, is_informative, normalize_slice, resize_probability,
    resize_to_grid, write_gray_png, BuildConfig, DatasetError, DatasetManifest, ManifestEntry,
    Plane, Result, SlicePair, Split, SubjectSplits,
};
use crate::volume::{ProbabilityMaps, Volume3D};

/// Manifests keyed by plane and split.
pub type ManifestSet = BTreeMap<(Plane, Split), DatasetManifest>;

/// Informative slice pairs of one subject along one plane, in index order.
pub fn build_subject_slices(
    vol: &Volume3D,
    maps: &ProbabilityMaps,
    plane: Plane,
    config: &BuildConfig,
) -> Result<Vec<SlicePair>> {
    if vol.shape() != maps.shape() {
        return Err(DatasetError::ShapeMismatch(format!(
            "subject {}: volume {:?} vs maps {:?}",
            vol.subject_id(),
            vol.shape(),
            maps.shape()
        )));
    }
    let target = config.target_resolution;
    let images = extract_slices(vol.data(), plane);
    let gms = extract_slices(maps.p_gm(), plane);
    let wms = extract_slices(maps.p_wm(), plane);
    let mut out = Vec::new();
    for (index, ((img, gm), wm)) in images.iter().zip(&gms).zip(&wms).enumerate() {
        let gm = resize_probability(gm.view(), target)?;
        let wm = resize_probability(wm.view(), target)?;
        let label = fuse_mask(gm.view(), wm.view(), config.threshold)?;
        if !is_informative(label.view(), config.min_tissue_fraction) {
            continue;
        }
        let image = normalize_slice(resize_to_grid(img.view(), target)?.view());
        out.push(SlicePair {
            image,
            label,
            subject_id: vol.subject_id().to_string(),
            plane,
            index,
        });
    }
    Ok(out)
}

/// Slice every subject of every split, write the PNG pairs under
/// `<root>/<split>/<plane>/`, and write one `<plane>_<split>.jsonl` manifest
/// per plane and split.
///
/// Subjects are processed in parallel; manifest entries are assembled in
/// split-list order, so the output does not depend on scheduling.
pub fn build_dataset<F>(
    splits: &SubjectSplits,
    load: F,
    config: &BuildConfig,
    seed: u64,
    root: &Path,
) -> Result<ManifestSet>
where
    F: Fn(&str) -> Result<(Volume3D, ProbabilityMaps)> + Sync,
{
    config.validate()?;
    let hash = config.hash();
    let jobs: Vec<(Split, &String)> = Split::ALL
        .into_iter()
        .flat_map(|s| splits.get(s).iter().map(move |id| (s, id)))
        .collect();

    let per_subject: Vec<Vec<ManifestEntry>> = jobs
        .par_iter()
        .map(|(split, id)| -> Result<Vec<ManifestEntry>> {
            let (vol, maps) = load(id)?;
            let mut entries = Vec::new();
            for &plane in &config.planes {
                for pair in build_subject_slices(&vol, &maps, plane, config)? {
                    let dir = format!("{split}/{plane}");
                    let entry = ManifestEntry {
                        image_path: format!("{dir}/{}_{}.png", pair.subject_id, pair.index),
                        label_path: format!("{dir}/{}_{}_label.png", pair.subject_id, pair.index),
                        subject_id: pair.subject_id.clone(),
                        plane,
                        index: pair.index,
                    };
                    let pixels = pair.image.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
                    write_gray_png(root.join(&entry.image_path), &pixels)?;
                    write_gray_png(root.join(&entry.label_path), &pair.label)?;
                    entries.push(entry);
                }
            }
            Ok(entries)
        })
        .collect::<Result<_>>()?;

    let mut set = ManifestSet::new();
    for &plane in &config.planes {
        for split in Split::ALL {
            set.insert((plane, split), DatasetManifest::new(root, split, seed, hash.clone()));
        }
    }
    for ((split, _), entries) in jobs.iter().zip(per_subject) {
        for e in entries {
            set.get_mut(&(e.plane, *split)).expect("plane registered").entries.push(e);
        }
    }
    for ((plane, split), manifest) in &set {
        manifest.write(root.join(DatasetManifest::file_name(*plane, *split)))?;
    }
    Ok(set)
}
