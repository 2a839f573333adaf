//! Declarative pipeline configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use brainseg_core::metrics::EvalSettings;
use brainseg_core::viz::PanelStyle;
use brainseg_core::{BuildConfig, ToolConfig};
use brainseg_model::{EncoderVariant, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives the subject split, the k-means fallback, model init,
    /// batch shuffling and the evaluation sample.
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub tools: Tools,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub build: BuildConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub viz: PanelStyle,
    #[serde(default)]
    pub tiny: TinyCaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of raw `.nii` / `.nii.gz` scans.
    pub raw_dir: PathBuf,
    /// Preprocessed volumes and the slice dataset go here.
    pub work_dir: PathBuf,
    /// Checkpoints, histories and reports go here.
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tools {
    pub bet: ToolConfig,
    pub fast: ToolConfig,
    /// Use identity brain extraction and k-means maps when a tool is missing.
    pub allow_fallback: bool,
}

impl Default for Tools {
    fn default() -> Self {
        Self {
            bet: ToolConfig::new("bet"),
            fast: ToolConfig::new("fast"),
            allow_fallback: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: EncoderVariant,
    /// MedSAM / SAM weights (`.pth` or `.safetensors`).
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::VitB,
            pretrained: None,
        }
    }
}

/// Dataset caps applied under `--tiny`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TinyCaps {
    pub max_subjects: usize,
    pub max_train_slices: usize,
    pub max_val_slices: usize,
    pub max_eval_slices: usize,
}

impl Default for TinyCaps {
    fn default() -> Self {
        Self {
            max_subjects: 8,
            max_train_slices: 32,
            max_val_slices: 8,
            max_eval_slices: 16,
        }
    }
}

impl PipelineConfig {
    /// Parse and validate `path`. Relative paths inside the file are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.raw_dir);
        fix(&mut self.paths.work_dir);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.model.pretrained.as_mut() {
            fix(p);
        }
    }

    /// Copy the top-level seed into the sections that carry their own.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.split;
        for (name, v) in [("train", f.train), ("val", f.val), ("test", f.test)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!("split.{name} = {v} must be a non-negative number");
            }
        }
        if (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
            bail!("split fractions sum to {}, expected 1", f.train + f.val + f.test);
        }
        self.build.validate().context("invalid [build] section")?;
        self.train.validate().context("invalid [train] section")?;
        self.tools.bet.validate().context("invalid [tools.bet] section")?;
        self.tools.fast.validate().context("invalid [tools.fast] section")?;
        if self.eval.sample_n == 0 {
            bail!("eval.sample_n must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.viz.overlay_alpha) {
            bail!("viz.overlay_alpha {} outside [0, 1]", self.viz.overlay_alpha);
        }
        let caps = self.tiny;
        if caps.max_subjects == 0 || caps.max_train_slices == 0 || caps.max_val_slices == 0 || caps.max_eval_slices == 0 {
            bail!("[tiny] caps must all be at least 1");
        }
        if let Some(p) = &self.model.pretrained {
            if !p.is_file() {
                bail!("model.pretrained {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn preprocessed_dir(&self) -> PathBuf {
        self.paths.work_dir.join("preprocessed")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.work_dir.join("dataset")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [paths]
        raw_dir = "raw"
        work_dir = "work"
        output_dir = "out"
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let mut cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.resolve_paths(Path::new("/base"));
        cfg.validate().unwrap();
        assert_eq!(cfg.paths.raw_dir, Path::new("/base/raw"));
        assert_eq!(cfg.build.target_resolution, 256);
        assert_eq!(cfg.train.class_weights, [0.2, 1.0, 1.0]);
        assert_eq!(cfg.eval.sample_n, 1000);
        assert_eq!(cfg.tools.bet.executable_path, "bet");
        assert!(!cfg.tools.allow_fallback);
    }

    #[test]
    fn every_section_parses() {
        let text = r#"
            seed = 7
            [paths]
            raw_dir = "raw"
            work_dir = "work"
            output_dir = "out"
            [tools]
            bet = { executable_path = "bet", extra_args = ["-R"] }
            fast = { executable_path = "fast", timeout_s = 1800 }
            allow_fallback = true
            [split]
            train = 0.70
            val = 0.15
            test = 0.15
            [build]
            target_resolution = 128
            threshold = 0.5
            min_tissue_fraction = 0.02
            planes = ["axial", "coronal"]
            [model]
            variant = "tiny"
            [train]
            learning_rate = 1e-4
            batch_size = 4
            max_epochs = 3
            class_weights = [0.2, 1.0, 1.0]
            weight_decay = 0.01
            early_stop_patience = 2
            prompt = "tissue_box"
            [eval]
            sample_n = 50
            aggregation = "micro"
            empty_policy = "exclude"
            [viz]
            overlay_alpha = 0.25
            [tiny]
            max_subjects = 2
        "#;
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.tools.bet.extra_args, ["-R"]);
        assert_eq!(cfg.tools.fast.timeout_s, 1800.0);
        assert_eq!(cfg.model.variant, EncoderVariant::Tiny);
        assert_eq!(cfg.eval.aggregation, brainseg_core::Aggregation::Micro);
        assert_eq!(cfg.tiny.max_subjects, 2);
        assert_eq!(cfg.tiny.max_eval_slices, 16);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nlearning_rat = 0.1\n");
        assert!(toml::from_str::<PipelineConfig>(&text).is_err());
        let text = format!("colour = 1\n{MINIMAL}");
        assert!(toml::from_str::<PipelineConfig>(&text).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let text = format!("{MINIMAL}\n[split]\ntrain = 0.8\nval = 0.15\ntest = 0.15\n");
        let cfg: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
        let text = format!("{MINIMAL}\n[build]\nthreshold = 1.5\n");
        let cfg: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.apply_seed(42);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.eval.seed), (42, 42, 42));
    }
}
