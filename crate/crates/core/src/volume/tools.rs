//! Subprocess clients for the external `bet` (brain extraction) and `fast`
//! (tissue classification) command-line tools.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{
    load_volume, read_array, write_volume, MapSource, ProbabilityMaps, Result, Volume3D,
    VolumeError,
};

/// Environment variable naming the default tool installation root.
pub const FSL_DIR_ENV: &str = "BRAINSEG_FSL_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub executable_path: String,
    #[serde(default)]
    pub extra_args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    3600.0
}

impl ToolConfig {
    pub fn new(executable_path: impl Into<String>) -> Self {
        Self {
            executable_path: executable_path.into(),
            extra_args: Vec::new(),
            timeout_s: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(VolumeError::ToolFailure {
                tool: self.executable_path.clone(),
                reason: format!("timeout_s must be positive, got {}", self.timeout_s),
            });
        }
        Ok(())
    }
}

/// Which files of the tissue classifier's output hold the class maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueOutputs {
    /// File name pattern; `{base}` is the output basename, `{class}` the class index.
    pub pattern: String,
    pub gm_class: usize,
    pub wm_class: usize,
    /// Pass `-p` so the tool writes per-class probability maps.
    pub request_probability_maps: bool,
}

impl Default for TissueOutputs {
    fn default() -> Self {
        Self {
            pattern: "{base}_prob_{class}.nii.gz".to_string(),
            gm_class: 1,
            wm_class: 2,
            request_probability_maps: true,
        }
    }
}

impl TissueOutputs {
    fn path_for(&self, base: &Path, class: usize) -> PathBuf {
        PathBuf::from(
            self.pattern
                .replace("{base}", &base.to_string_lossy())
                .replace("{class}", &class.to_string()),
        )
    }
}

/// Locate an executable. Paths containing a separator are taken literally;
/// bare names are looked up under `$BRAINSEG_FSL_DIR/bin`, then `$PATH`.
pub fn resolve_executable(name: &str) -> Result<PathBuf> {
    let literal = Path::new(name);
    if literal.components().count() > 1 || literal.is_absolute() {
        return if literal.is_file() {
            Ok(literal.to_path_buf())
        } else {
            Err(VolumeError::ToolNotFound(name.to_string()))
        };
    }
    let mut dirs: Vec<PathBuf> = Vec::new();
    if let Some(root) = std::env::var_os(FSL_DIR_ENV) {
        let root = PathBuf::from(root);
        dirs.push(root.join("bin"));
        dirs.push(root);
    }
    if let Some(path) = std::env::var_os("PATH") {
        dirs.extend(std::env::split_paths(&path));
    }
    dirs.into_iter()
        .map(|d| d.join(name))
        .find(|p| p.is_file())
        .ok_or_else(|| VolumeError::ToolNotFound(name.to_string()))
}

fn run_tool(cfg: &ToolConfig, args: &[String], workdir: &Path) -> Result<()> {
    cfg.validate()?;
    let exe = resolve_executable(&cfg.executable_path)?;
    let tool = cfg.executable_path.clone();
    let stdout_path = workdir.join("tool.stdout");
    let stderr_path = workdir.join("tool.stderr");
    let mut child = Command::new(&exe)
        .args(args)
        .current_dir(workdir)
        .env("FSLOUTPUTTYPE", "NIFTI_GZ")
        .stdin(Stdio::null())
        .stdout(File::create(&stdout_path)?)
        .stderr(File::create(&stderr_path)?)
        .spawn()
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
                VolumeError::ToolNotFound(format!("{tool} ({e})"))
            }
            _ => VolumeError::Io(e),
        })?;

    let deadline = Instant::now() + Duration::from_secs_f64(cfg.timeout_s);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(VolumeError::Timeout {
                tool,
                seconds: cfg.timeout_s,
            });
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    if !status.success() {
        let stderr = std::fs::read_to_string(&stderr_path).unwrap_or_default();
        let tail: String = stderr.lines().rev().take(5).collect::<Vec<_>>().join(" | ");
        return Err(VolumeError::ToolFailure {
            tool,
            reason: format!("{status}; stderr: {tail}"),
        });
    }
    Ok(())
}

/// Run `bet <in> <out> [extra_args]` and return the skull-stripped volume.
///
/// The result must keep the input shape and may only remove signal.
pub fn run_brain_extraction(vol: &Volume3D, cfg: &ToolConfig) -> Result<Volume3D> {
    let tmp = tempfile::tempdir()?;
    let input = tmp.path().join(format!("{}.nii.gz", vol.subject_id()));
    let output = tmp.path().join(format!("{}_brain.nii.gz", vol.subject_id()));
    write_volume(vol, &input)?;

    let mut args = vec![
        input.to_string_lossy().into_owned(),
        output.to_string_lossy().into_owned(),
    ];
    args.extend(cfg.extra_args.iter().cloned());
    run_tool(cfg, &args, tmp.path())?;

    let failure = |reason: String| VolumeError::ToolFailure {
        tool: cfg.executable_path.clone(),
        reason,
    };
    if !output.is_file() {
        return Err(failure(format!("expected output {} was not written", output.display())));
    }
    let stripped = load_volume(&output)?;
    if stripped.shape() != vol.shape() {
        return Err(failure(format!(
            "output shape {:?} differs from input {:?}",
            stripped.shape(),
            vol.shape()
        )));
    }
    let (before, after) = (vol.count_nonzero(), stripped.count_nonzero());
    if after > before {
        return Err(failure(format!(
            "output has more nonzero voxels ({after}) than input ({before})"
        )));
    }
    vol.with_data(stripped.into_data())
}

/// Run the tissue classifier with the default output naming.
pub fn run_tissue_segmentation(vol: &Volume3D, cfg: &ToolConfig) -> Result<ProbabilityMaps> {
    run_tissue_segmentation_with(vol, cfg, &TissueOutputs::default())
}

/// Run `fast -o <base> [-p] [extra_args] <in>` and read back the gray- and
/// white-matter maps named by `outputs`.
pub fn run_tissue_segmentation_with(
    vol: &Volume3D,
    cfg: &ToolConfig,
    outputs: &TissueOutputs,
) -> Result<ProbabilityMaps> {
    resolve_executable(&cfg.executable_path)?;
    if vol.count_nonzero() == 0 {
        let zeros = Array3::zeros(vol.shape());
        return ProbabilityMaps::for_volume(vol, zeros.clone(), zeros, MapSource::ExternalFast);
    }

    let tmp = tempfile::tempdir()?;
    let input = tmp.path().join(format!("{}.nii.gz", vol.subject_id()));
    let base = tmp.path().join(vol.subject_id());
    write_volume(vol, &input)?;

    let mut args = vec!["-o".to_string(), base.to_string_lossy().into_owned()];
    if outputs.request_probability_maps {
        args.push("-p".to_string());
    }
    args.extend(cfg.extra_args.iter().cloned());
    args.push(input.to_string_lossy().into_owned());
    run_tool(cfg, &args, tmp.path())?;

    let read = |class: usize| -> Result<Array3<f32>> {
        let path = outputs.path_for(&base, class);
        if !path.is_file() {
            return Err(VolumeError::ToolFailure {
                tool: cfg.executable_path.clone(),
                reason: format!("expected output {} was not written", path.display()),
            });
        }
        Ok(read_array(&path)?.0)
    };
    let gm = read(outputs.gm_class)?;
    let wm = read(outputs.wm_class)?;
    ProbabilityMaps::for_volume(vol, gm, wm, MapSource::ExternalFast)
}
