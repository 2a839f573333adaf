mod common;

use std::path::Path;
use std::process::{Command, Output};

use brainseg_core::metrics::MetricsReport;
use brainseg_core::{DatasetManifest, Plane, Split};

fn brainseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("BRAINSEG_FSL_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_tool_without_fallback_exits_2_and_names_the_tool() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let out = brainseg(dir.path(), &["preprocess", "--config", "brainseg.toml"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("brainseg-test-missing-bet"), "{}", stderr(&out));
}

#[test]
fn config_and_usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    assert_eq!(code(&brainseg(dir.path(), &["build"])), 1);
    assert_eq!(code(&brainseg(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&brainseg(dir.path(), &["train", "--config", "brainseg.toml"])), 1);
    assert_eq!(code(&brainseg(dir.path(), &["train", "--config", "brainseg.toml", "--plan", "oblique"])), 1);
    assert_eq!(code(&brainseg(dir.path(), &["--help"])), 0);

    std::fs::write(dir.path().join("bad.toml"), "[paths]\nraw_dir = \"raw\"\n").unwrap();
    assert_eq!(code(&brainseg(dir.path(), &["build", "--config", "bad.toml"])), 1);
    std::fs::write(
        dir.path().join("typo.toml"),
        "[paths]\nraw_dir = \"raw\"\nwork_dir = \"w\"\noutput_dir = \"o\"\n[train]\nlearning_rat = 1.0\n",
    )
    .unwrap();
    let out = brainseg(dir.path(), &["build", "--config", "typo.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn stages_out_of_order_fail_with_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    common::fixture(dir.path(), "");
    let cfg = ["--config", "brainseg.toml", "--plan", "axial", "--tiny"];
    assert_eq!(code(&brainseg(dir.path(), &[&["build"], &cfg[..2]].concat())), 3);
    assert_eq!(code(&brainseg(dir.path(), &[&["train"], &cfg[..]].concat())), 4);
    assert_eq!(code(&brainseg(dir.path(), &[&["eval"], &cfg[..]].concat())), 5);
    assert_eq!(code(&brainseg(dir.path(), &[&["viz"], &cfg[..]].concat())), 6);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::fixture(root, "");
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "brainseg.toml", "--tiny"];
        all.extend_from_slice(args);
        let out = brainseg(root, &all);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    };

    run(&["preprocess", "--allow-fallback"]);
    let prov = std::fs::read_to_string(root.join("work/preprocessed/provenance.jsonl")).unwrap();
    assert_eq!(prov.lines().count(), common::SUBJECTS);
    for line in prov.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["tissue_source"], "kmeans_fallback");
        assert_eq!(v["brain_extraction"], "passthrough");
        assert_eq!(v["seed"], 3);
    }
    for i in 0..common::SUBJECTS {
        for f in ["brain.nii.gz", "p_gm.nii.gz", "p_wm.nii.gz"] {
            assert!(root.join(format!("work/preprocessed/sub{i:02}/{f}")).is_file());
        }
    }

    run(&["build"]);
    let data = root.join("work/dataset");
    let mut subjects_by_split = Vec::new();
    for split in Split::ALL {
        let mut ids = std::collections::BTreeSet::new();
        for plane in Plane::ALL {
            let m = DatasetManifest::read(data.join(DatasetManifest::file_name(plane, split))).unwrap();
            assert!(!m.is_empty(), "{plane} {split}");
            assert_eq!(m.seed, 3);
            ids.extend(m.entries.iter().map(|e| e.subject_id.clone()));
        }
        subjects_by_split.push(ids);
    }
    assert_eq!(subjects_by_split.iter().map(|s| s.len()).collect::<Vec<_>>(), [2, 1, 1]);

    run(&["train", "--plan", "unified"]);
    let out = root.join("out/unified");
    assert!(out.join("model.safetensors").is_file());
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(meta["variant"], "tiny");
    assert_eq!(meta["run"]["seed"], 3);
    assert_eq!(meta["run"]["steps"], 2);
    let csv = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss,wall_time_s\n"));
    assert_eq!(csv.lines().count(), 2);

    run(&["eval", "--plan", "unified", "--panels", "2"]);
    for plane in Plane::ALL {
        let text = std::fs::read_to_string(out.join(format!("report_{plane}.json"))).unwrap();
        let report: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(report.model_id, format!("unified_{plane}"));
        assert!(report.n_slices_evaluated >= 1 && report.n_slices_evaluated <= 3);
        assert!((0.0..=1.0).contains(&report.overall_dice));
        assert_eq!(report.sampling_seed, 3);
    }
    let comparison = std::fs::read_to_string(root.join("out/comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 4);
    assert!(comparison.starts_with("model,overall_dice,overall_iou\n"));
    let panels: Vec<_> = std::fs::read_dir(out.join("panels")).unwrap().collect();
    assert_eq!(panels.len(), 2);

    std::fs::remove_dir_all(out.join("panels")).unwrap();
    run(&["viz", "--plan", "unified", "--panels", "1"]);
    let panels: Vec<_> = std::fs::read_dir(out.join("panels"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(panels.len(), 1);
    assert!(panels[0].starts_with("unified_axial_axial_sub") && panels[0].ends_with("_panel.png"), "{panels:?}");
}
