//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use brainseg_core::dataset::{build_dataset, split_subjects, ManifestSet};
use brainseg_core::metrics::{compare_models, evaluate_model, sample_indices, EvalSettings, MetricsReport};
use brainseg_core::viz::{panel_file_name, save_panel};
use brainseg_core::volume::{
    is_nifti_path, kmeans_tissue_prior, load_maps, load_volume, run_brain_extraction, run_tissue_segmentation,
    write_maps, write_volume, VolumeError, FSL_DIR_ENV,
};
use brainseg_core::{DatasetManifest, MapSource, Plane, Split, Volume3D};
use brainseg_model::trainer::plan_manifest;
use brainseg_model::{train, EncoderVariant, ModelConfig, Plan, SegModel, TrainHistory};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_PREPROCESS: u8 = 2;
pub const EXIT_BUILD: u8 = 3;
pub const EXIT_TRAIN: u8 = 4;
pub const EXIT_EVAL: u8 = 5;
pub const EXIT_VIZ: u8 = 6;

pub const CHECKPOINT_FILE: &str = "model.safetensors";
const BRAIN_FILE: &str = "brain.nii.gz";
const GM_FILE: &str = "p_gm.nii.gz";
const WM_FILE: &str = "p_wm.nii.gz";
const PROVENANCE_FILE: &str = "provenance.json";

/// A failed stage and the process exit code it maps to.
#[derive(Debug)]
pub struct CommandError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CommandError {}

pub trait WithExitCode<T> {
    fn exit_code(self, code: u8) -> Result<T, CommandError>;
}

impl<T> WithExitCode<T> for Result<T> {
    fn exit_code(self, code: u8) -> Result<T, CommandError> {
        self.map_err(|error| CommandError { code, error })
    }
}

/// Flags that modify a run on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub tiny: bool,
    pub allow_fallback: bool,
    pub panels: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    pub raw_path: String,
    /// `bet`, or `passthrough` when the tool was missing and fallback allowed.
    pub brain_extraction: String,
    pub tissue_source: MapSource,
    pub bet_executable: String,
    pub fast_executable: String,
    pub fast_args: Vec<String>,
    pub tool_version: Option<String>,
    pub seed: u64,
}

fn fsl_version() -> Option<String> {
    let root = std::env::var_os(FSL_DIR_ENV)?;
    let text = std::fs::read_to_string(Path::new(&root).join("etc").join("fslversion")).ok()?;
    Some(text.trim().to_string())
}

fn raw_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing raw volumes in {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && is_nifti_path(&path) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Brain-extract every raw scan and produce its tissue probability maps.
pub fn cmd_preprocess(cfg: &PipelineConfig, opts: &RunOptions) -> Result<Vec<Provenance>> {
    let allow_fallback = opts.allow_fallback || cfg.tools.allow_fallback;
    let mut raws = raw_volumes(&cfg.paths.raw_dir)?;
    if opts.tiny {
        raws.truncate(cfg.tiny.max_subjects);
    }
    let out = cfg.preprocessed_dir();
    std::fs::create_dir_all(&out)?;
    let version = fsl_version();
    let mut records = Vec::new();
    let mut seen = BTreeMap::new();
    for raw in &raws {
        let vol = load_volume(raw)?;
        let id = vol.subject_id().to_string();
        if let Some(prev) = seen.insert(id.clone(), raw.clone()) {
            bail!("subject {id} appears twice: {} and {}", prev.display(), raw.display());
        }
        let (brain, extraction) = match run_brain_extraction(&vol, &cfg.tools.bet) {
            Ok(b) => (b, "bet"),
            Err(VolumeError::ToolNotFound(tool)) if allow_fallback => {
                log::warn!("{id}: brain extraction tool `{tool}` not found, passing the volume through unchanged");
                (vol.clone(), "passthrough")
            }
            Err(e) => return Err(e).with_context(|| format!("brain extraction for {id}")),
        };
        let maps = match run_tissue_segmentation(&brain, &cfg.tools.fast) {
            Ok(m) => m,
            Err(VolumeError::ToolNotFound(tool)) if allow_fallback => {
                log::warn!("{id}: tissue segmentation tool `{tool}` not found, using k-means pseudo-labels");
                kmeans_tissue_prior(&brain, cfg.seed).with_context(|| format!("k-means fallback for {id}"))?
            }
            Err(e) => return Err(e).with_context(|| format!("tissue segmentation for {id}")),
        };
        let dir = out.join(&id);
        write_volume(&brain, dir.join(BRAIN_FILE))?;
        write_maps(&maps, &brain, dir.join(GM_FILE), dir.join(WM_FILE))?;
        let record = Provenance {
            subject_id: id.clone(),
            raw_path: raw.display().to_string(),
            brain_extraction: extraction.to_string(),
            tissue_source: maps.source(),
            bet_executable: cfg.tools.bet.executable_path.clone(),
            fast_executable: cfg.tools.fast.executable_path.clone(),
            fast_args: cfg.tools.fast.extra_args.clone(),
            tool_version: version.clone(),
            seed: cfg.seed,
        };
        std::fs::write(dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
        log::info!("preprocessed {id} ({extraction}, {:?})", maps.source());
        records.push(record);
    }
    let mut log_text = String::new();
    for r in &records {
        log_text += &serde_json::to_string(r)?;
        log_text.push('\n');
    }
    std::fs::write(out.join("provenance.jsonl"), log_text)?;

    for r in &records {
        read_subject(&out, &r.subject_id).with_context(|| format!("validating outputs of {}", r.subject_id))?;
    }
    Ok(records)
}

fn read_provenance(dir: &Path) -> Result<Provenance> {
    let path = dir.join(PROVENANCE_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn read_subject(root: &Path, id: &str) -> Result<(Volume3D, brainseg_core::ProbabilityMaps)> {
    let dir = root.join(id);
    let source = read_provenance(&dir)?.tissue_source;
    let brain = load_volume(dir.join(BRAIN_FILE))?;
    let spacing = brain.spacing();
    let vol = Volume3D::new(brain.into_data(), spacing, id)?;
    let maps = load_maps(dir.join(GM_FILE), dir.join(WM_FILE), source)?;
    if maps.shape() != vol.shape() {
        bail!("maps {:?} do not match volume {:?}", maps.shape(), vol.shape());
    }
    Ok((vol, maps))
}

/// Preprocessed subject ids, sorted.
pub fn preprocessed_subjects(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let dir = cfg.preprocessed_dir();
    if !dir.is_dir() {
        bail!("no preprocessed subjects at {}; run `brainseg preprocess` first", dir.display());
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.join(PROVENANCE_FILE).is_file() {
            ids.push(path.file_name().expect("dir entry has a name").to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Split subjects, slice them and write per-plane per-split manifests.
pub fn cmd_build(cfg: &PipelineConfig) -> Result<ManifestSet> {
    let ids = preprocessed_subjects(cfg)?;
    let f = cfg.split;
    let splits = split_subjects(&ids, (f.train, f.val, f.test), cfg.seed)?;
    let root = cfg.dataset_dir();
    if root.exists() {
        std::fs::remove_dir_all(&root).with_context(|| format!("clearing {}", root.display()))?;
    }
    std::fs::create_dir_all(&root)?;
    let pre = cfg.preprocessed_dir();
    let load = |id: &str| {
        read_subject(&pre, id).map_err(|e| std::io::Error::other(format!("subject {id}: {e:#}")).into())
    };
    let set = build_dataset(&splits, load, &cfg.build, cfg.seed, &root)?;
    let splits_json = serde_json::json!({
        "seed": cfg.seed,
        "fractions": [f.train, f.val, f.test],
        "train": splits.train,
        "val": splits.val,
        "test": splits.test,
    });
    std::fs::write(root.join("splits.json"), serde_json::to_string_pretty(&splits_json)? + "\n")?;

    for ((plane, split), manifest) in &set {
        let path = root.join(DatasetManifest::file_name(*plane, *split));
        let back = DatasetManifest::read(&path)?;
        if back.entries != manifest.entries {
            bail!("manifest {} does not read back", path.display());
        }
        for e in &back.entries {
            for p in [back.image_path(e), back.label_path(e)] {
                if !p.is_file() {
                    bail!("manifest {} references missing {}", path.display(), p.display());
                }
            }
        }
        log::info!("{plane} {split}: {} slices", manifest.len());
    }
    Ok(set)
}

/// Evenly spaced subset of at most `n` entries, keeping order.
fn cap_entries(manifest: &mut DatasetManifest, n: usize) {
    let len = manifest.entries.len();
    if len > n {
        let keep: Vec<_> = (0..n).map(|i| manifest.entries[i * len / n].clone()).collect();
        manifest.entries = keep;
    }
}

fn fresh_model(cfg: &PipelineConfig, tiny: bool) -> Result<SegModel> {
    if tiny || cfg.model.variant == EncoderVariant::Tiny {
        return Ok(SegModel::init_tiny(cfg.seed)?);
    }
    match &cfg.model.pretrained {
        Some(path) => Ok(SegModel::load_pretrained(path, ModelConfig::vit_b(), cfg.seed)
            .with_context(|| format!("loading pretrained weights {}", path.display()))?),
        None => {
            log::warn!("no model.pretrained weights configured; the ViT-B encoder is randomly initialized");
            Ok(SegModel::init(ModelConfig::vit_b(), cfg.seed)?)
        }
    }
}

pub fn plan_dir(cfg: &PipelineConfig, plan: Plan) -> PathBuf {
    cfg.paths.output_dir.join(plan.as_str())
}

/// History CSV without the wall-time column.
pub fn history_losses_csv(history: &TrainHistory) -> String {
    history
        .to_csv()
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fine-tune one plan and write `<out>/<plan>/` checkpoint and history.
pub fn cmd_train(cfg: &PipelineConfig, plan: Plan, opts: &RunOptions) -> Result<TrainHistory> {
    let root = cfg.dataset_dir();
    let mut train_m = plan_manifest(&root, plan, Split::Train)?;
    let mut val_m = plan_manifest(&root, plan, Split::Val)?;
    if opts.tiny {
        cap_entries(&mut train_m, cfg.tiny.max_train_slices);
        cap_entries(&mut val_m, cfg.tiny.max_val_slices);
    }
    log::info!("training {plan} on {} slices, validating on {}", train_m.len(), val_m.len());
    let model = fresh_model(cfg, opts.tiny)?;
    let history = train(&model, &train_m, &val_m, &cfg.train)?;

    let out = plan_dir(cfg, plan);
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let run = serde_json::json!({
        "plan": plan,
        "seed": cfg.seed,
        "tiny": opts.tiny,
        "train": cfg.train,
        "build_config_hash": train_m.build_config_hash,
        "train_slices": train_m.len(),
        "val_slices": val_m.len(),
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "steps": history.steps,
    });
    model.save(&ckpt, run)?;
    std::fs::write(out.join("history.csv"), history.to_csv())?;
    let hist_json = serde_json::json!({ "plan": plan, "seed": cfg.seed, "history": history });
    std::fs::write(out.join("history.json"), serde_json::to_string_pretty(&hist_json)? + "\n")?;

    SegModel::load(&ckpt).with_context(|| format!("validating checkpoint {}", ckpt.display()))?;
    log::info!("best epoch {} of {}", history.best_epoch, history.records.len());
    Ok(history)
}

/// Report name for a plan evaluated on one plane.
pub fn model_id(plan: Plan, plane: Plane) -> String {
    match plan {
        Plan::Unified => format!("unified_{plane}"),
        _ => plan.to_string(),
    }
}

fn load_checkpoint(cfg: &PipelineConfig, plan: Plan, opts: &RunOptions) -> Result<SegModel> {
    let ckpt = opts.checkpoint.clone().unwrap_or_else(|| plan_dir(cfg, plan).join(CHECKPOINT_FILE));
    if !ckpt.is_file() {
        bail!("checkpoint {} not found; run `brainseg train` first", ckpt.display());
    }
    Ok(SegModel::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?.0)
}

fn test_manifest(cfg: &PipelineConfig, plane: Plane) -> Result<DatasetManifest> {
    let path = cfg.dataset_dir().join(DatasetManifest::file_name(plane, Split::Test));
    if !path.is_file() {
        bail!("test manifest {} not found; run `brainseg build` first", path.display());
    }
    Ok(DatasetManifest::read(&path)?)
}

fn eval_settings(cfg: &PipelineConfig, tiny: bool) -> EvalSettings {
    let mut settings = cfg.eval.clone();
    if tiny {
        settings.sample_n = settings.sample_n.min(cfg.tiny.max_eval_slices);
    }
    settings
}

/// Score a trained plan on the test split of each of its planes.
pub fn cmd_eval(cfg: &PipelineConfig, plan: Plan, opts: &RunOptions) -> Result<Vec<MetricsReport>> {
    let model = load_checkpoint(cfg, plan, opts)?;
    let settings = eval_settings(cfg, opts.tiny);
    let out = plan_dir(cfg, plan);
    std::fs::create_dir_all(&out)?;
    let mut reports = Vec::new();
    let mut summary = format!("{}\n", MetricsReport::CSV_HEADER);
    for plane in plan.planes() {
        let manifest = test_manifest(cfg, plane)?;
        let report = evaluate_model(&model, &model_id(plan, plane), &manifest, &settings)?;
        std::fs::write(out.join(format!("report_{plane}.json")), report.to_json() + "\n")?;
        std::fs::write(
            out.join(format!("report_{plane}.csv")),
            format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
        )?;
        summary += &report.csv_row();
        summary.push('\n');
        log::info!("{}: dice {:.4}, iou {:.4}", report.model_id, report.overall_dice, report.overall_iou);
        reports.push(report);
    }
    std::fs::write(out.join("metrics.csv"), summary)?;

    for plane in plan.planes() {
        let path = out.join(format!("report_{plane}.json"));
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str::<MetricsReport>(&text).with_context(|| format!("validating {}", path.display()))?;
    }
    write_comparison(cfg)?;
    if let Some(n) = opts.panels.filter(|&n| n > 0) {
        render_panels(cfg, plan, &model, &settings, n)?;
    }
    Ok(reports)
}

/// Rank every report under the output directory into `comparison.csv`
/// and `comparison.txt`.
pub fn write_comparison(cfg: &PipelineConfig) -> Result<()> {
    let mut reports = Vec::new();
    for plan in Plan::ALL {
        for plane in plan.planes() {
            let path = plan_dir(cfg, plan).join(format!("report_{plane}.json"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)?;
                reports.push(serde_json::from_str::<MetricsReport>(&text).with_context(|| format!("parsing {}", path.display()))?);
            }
        }
    }
    let table = compare_models(&reports);
    std::fs::write(cfg.paths.output_dir.join("comparison.csv"), table.to_csv())?;
    std::fs::write(cfg.paths.output_dir.join("comparison.txt"), table.to_text())?;
    Ok(())
}

/// Write `n` panels for the first slices of the evaluation sample.
pub fn render_panels(
    cfg: &PipelineConfig,
    plan: Plan,
    model: &SegModel,
    settings: &EvalSettings,
    n: usize,
) -> Result<Vec<PathBuf>> {
    let dir = plan_dir(cfg, plan).join("panels");
    let mut written = Vec::new();
    for plane in plan.planes() {
        let manifest = test_manifest(cfg, plane)?;
        for i in sample_indices(manifest.len(), settings.sample_n, settings.seed) {
            if written.len() == n {
                return Ok(written);
            }
            let entry = &manifest.entries[i];
            let pair = manifest.load_pair(entry)?;
            let prompt = settings.prompt.prompt_for(pair.label.view());
            let pred = model.predict(pair.image.view(), &prompt)?;
            let path = dir.join(panel_file_name(&model_id(plan, plane), plane, &entry.subject_id, entry.index));
            save_panel(
                &path,
                pair.image.view(),
                pair.label.view(),
                pred.label.view(),
                pred.probabilities.view(),
                &cfg.viz,
            )?;
            written.push(path);
        }
    }
    if written.len() < n {
        log::warn!("only {} test slices available for panels, {n} requested", written.len());
    }
    Ok(written)
}

/// Panels only, without recomputing metrics.
pub fn cmd_viz(cfg: &PipelineConfig, plan: Plan, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint(cfg, plan, opts)?;
    let settings = eval_settings(cfg, opts.tiny);
    let written = render_panels(cfg, plan, &model, &settings, opts.panels.unwrap_or(4))?;
    for p in &written {
        if !p.is_file() {
            return Err(anyhow!("panel {} was not written", p.display()));
        }
    }
    Ok(written)
}
