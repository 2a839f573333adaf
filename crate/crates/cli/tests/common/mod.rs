#![allow(dead_code)]

use std::path::{Path, PathBuf};

use brainseg_core::synthetic::phantom_subject;
use brainseg_core::volume::write_volume;

pub const SUBJECTS: usize = 4;

/// Writes `SUBJECTS` phantom scans under `<dir>/raw` and a config that
/// points at them with missing tools, small slices and short training.
pub fn fixture(dir: &Path, extra: &str) -> PathBuf {
    let raw = dir.join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    for i in 0..SUBJECTS {
        let id = format!("sub{i:02}");
        let (vol, _) = phantom_subject(&id, (22, 24, 20), i as u64).unwrap();
        write_volume(&vol, raw.join(format!("{id}.nii.gz"))).unwrap();
    }
    let config = format!(
        r#"seed = 3

[paths]
raw_dir = "raw"
work_dir = "work"
output_dir = "out"

[tools]
bet = {{ executable_path = "brainseg-test-missing-bet" }}
fast = {{ executable_path = "brainseg-test-missing-fast" }}

[split]
train = 0.5
val = 0.25
test = 0.25

[build]
target_resolution = 32
min_tissue_fraction = 0.05

[train]
learning_rate = 0.001
batch_size = 2
max_epochs = 2
max_steps = 2

[eval]
sample_n = 3
{extra}"#
    );
    let path = dir.join("brainseg.toml");
    std::fs::write(&path, config).unwrap();
    path
}
