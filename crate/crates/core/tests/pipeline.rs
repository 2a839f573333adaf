use std::path::Path;

use brainseg_core::dataset::{build_dataset, split_subjects, BuildConfig, DatasetManifest, Plane, Split};
use brainseg_core::synthetic::phantom_subject;
use brainseg_core::volume::{
    kmeans_tissue_prior, load_volume, run_brain_extraction, run_tissue_segmentation, write_volume,
    ToolConfig, VolumeError,
};

const SHAPE: (usize, usize, usize) = (14, 15, 16);

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("IXI{i:03}")).collect()
}

fn seed_of(id: &str) -> u64 {
    id[3..].parse().unwrap()
}

fn build(root: &Path, config: &BuildConfig) -> Vec<(Plane, Split, usize)> {
    let splits = split_subjects(&ids(10), (0.7, 0.15, 0.15), 7).unwrap();
    let set = build_dataset(
        &splits,
        |id| Ok(phantom_subject(id, SHAPE, seed_of(id))?),
        config,
        7,
        root,
    )
    .unwrap();
    set.iter().map(|((p, s), m)| (*p, *s, m.len())).collect()
}

#[test]
fn build_writes_all_manifests_and_is_reproducible() {
    let config = BuildConfig {
        target_resolution: 32,
        ..BuildConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sizes = build(a.path(), &config);
    assert_eq!(sizes, build(b.path(), &config));
    assert_eq!(sizes.len(), 9);

    for plane in Plane::ALL {
        for split in Split::ALL {
            let name = DatasetManifest::file_name(plane, split);
            let bytes_a = std::fs::read(a.path().join(&name)).unwrap();
            assert_eq!(bytes_a, std::fs::read(b.path().join(&name)).unwrap(), "{name}");
            let m = DatasetManifest::read(a.path().join(&name)).unwrap();
            assert_eq!(m.split, split);
            assert!(!m.is_empty());
            let pair = m.load_pair(&m.entries[0]).unwrap();
            assert_eq!(pair.image.dim(), (32, 32));
            assert!(pair.label.iter().all(|&l| l <= 2));
        }
    }

    // subjects never cross splits
    let subjects = |split| {
        let m = DatasetManifest::read(a.path().join(DatasetManifest::file_name(Plane::Axial, split))).unwrap();
        m.entries.into_iter().map(|e| e.subject_id).collect::<std::collections::BTreeSet<_>>()
    };
    let (tr, va, te) = (subjects(Split::Train), subjects(Split::Val), subjects(Split::Test));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
}

#[test]
fn higher_tissue_cutoff_keeps_fewer_slices() {
    let dir = tempfile::tempdir().unwrap();
    let loose = build(dir.path(), &BuildConfig { target_resolution: 16, ..BuildConfig::default() });
    let strict = build(
        dir.path(),
        &BuildConfig {
            target_resolution: 16,
            min_tissue_fraction: 0.3,
            ..BuildConfig::default()
        },
    );
    for (l, s) in loose.iter().zip(&strict) {
        assert!(s.2 <= l.2);
    }
    assert!(strict.iter().map(|s| s.2).sum::<usize>() < loose.iter().map(|s| s.2).sum::<usize>());
}

#[test]
fn kmeans_recovers_phantom_tissue() {
    let (vol, truth) = phantom_subject("IXI000", (20, 20, 20), 1).unwrap();
    let maps = kmeans_tissue_prior(&vol, 0).unwrap();
    let agree = |est: &ndarray::Array3<f32>, gt: &ndarray::Array3<f32>| {
        let both = est.iter().zip(gt).filter(|(a, b)| **a > 0.5 && **b > 0.5).count() as f64;
        2.0 * both / (est.iter().filter(|v| **v > 0.5).count() + gt.iter().filter(|v| **v > 0.5).count()) as f64
    };
    assert!(agree(maps.p_gm(), truth.p_gm()) > 0.95);
    assert!(agree(maps.p_wm(), truth.p_wm()) > 0.95);
}

#[test]
fn nifti_round_trip_of_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let (vol, _) = phantom_subject("IXI002", SHAPE, 2).unwrap();
    let path = dir.path().join("IXI002.nii.gz");
    write_volume(&vol, &path).unwrap();
    let back = load_volume(&path).unwrap();
    assert_eq!(back.data(), vol.data());
    assert_eq!(back.subject_id(), "IXI002");
}

#[cfg(unix)]
mod fake_tools {
    use super::*;
    use std::os::unix::fs::PermissionsExt;

    fn script(dir: &Path, name: &str, body: &str) -> String {
        let path = dir.join(name);
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn extraction_and_segmentation_through_scripts() {
        let dir = tempfile::tempdir().unwrap();
        let bet = script(dir.path(), "bet", r#"cp "$1" "$2""#);
        // copies the input (values <= 0.5) into both class maps
        let fast = script(
            dir.path(),
            "fast",
            r#"base="$2"; for a in "$@"; do in="$a"; done
cp "$in" "${base}_prob_1.nii.gz"; cp "$in" "${base}_prob_2.nii.gz""#,
        );
        let (vol, _) = phantom_subject("IXI004", SHAPE, 4).unwrap();
        let vol = vol.with_data(vol.data().mapv(|v| v * 0.5)).unwrap();

        let stripped = run_brain_extraction(&vol, &ToolConfig::new(bet)).unwrap();
        assert_eq!(stripped.data(), vol.data());
        let maps = run_tissue_segmentation(&stripped, &ToolConfig::new(fast)).unwrap();
        assert_eq!(maps.p_gm(), vol.data());
        assert_eq!(maps.p_wm(), vol.data());
    }

    #[test]
    fn tool_failures_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (vol, _) = phantom_subject("IXI005", SHAPE, 5).unwrap();

        let failing = script(dir.path(), "bad", "echo boom >&2; exit 3");
        match run_brain_extraction(&vol, &ToolConfig::new(failing)) {
            Err(VolumeError::ToolFailure { reason, .. }) => assert!(reason.contains("boom")),
            other => panic!("unexpected {other:?}"),
        }

        let silent = script(dir.path(), "silent", "exit 0");
        assert!(matches!(
            run_brain_extraction(&vol, &ToolConfig::new(silent)),
            Err(VolumeError::ToolFailure { .. })
        ));

        let slow = script(dir.path(), "slow", "sleep 5");
        let mut cfg = ToolConfig::new(slow);
        cfg.timeout_s = 0.2;
        assert!(matches!(run_brain_extraction(&vol, &cfg), Err(VolumeError::Timeout { .. })));

        let missing = dir.path().join("nope").to_string_lossy().into_owned();
        assert!(matches!(
            run_tissue_segmentation(&vol, &ToolConfig::new(missing)),
            Err(VolumeError::ToolNotFound(_))
        ));
    }

    #[test]
    fn extraction_that_adds_signal_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (vol, _) = phantom_subject("IXI006", SHAPE, 6).unwrap();
        let other = dir.path().join("full.nii.gz");
        let full = vol.with_data(vol.data().mapv(|_| 1.0)).unwrap();
        write_volume(&full, &other).unwrap();
        let bet = script(dir.path(), "bet", &format!(r#"cp "{}" "$2""#, other.display()));
        assert!(matches!(
            run_brain_extraction(&vol, &ToolConfig::new(bet)),
            Err(VolumeError::ToolFailure { .. })
        ));
    }
}
