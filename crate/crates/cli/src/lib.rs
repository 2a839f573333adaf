//! `brainseg`: preprocess scans, build slice datasets, fine-tune, evaluate
//! and render panels, all driven by one TOML config.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use brainseg_model::Plan;
use clap::{Parser, Subcommand};

use commands::{CommandError, RunOptions};
pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "brainseg", version, about = "Brain tissue segmentation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub plan: Option<Plan>,
    /// Small randomly initialized model and capped dataset sizes.
    #[arg(long, global = true)]
    pub tiny: bool,
    /// Continue with pass-through extraction and k-means maps when a tool is missing.
    #[arg(long, global = true)]
    pub allow_fallback: bool,
    /// Number of visualization panels to write.
    #[arg(long, global = true, value_name = "N")]
    pub panels: Option<usize>,
    /// Checkpoint to evaluate instead of `<out>/<plan>/model.safetensors`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Brain extraction and tissue probability maps for every raw scan.
    Preprocess,
    /// Slice preprocessed subjects into per-plane train/val/test datasets.
    Build,
    /// Fine-tune the model for one plan.
    Train,
    /// Score a trained plan on its test slices.
    Eval,
    /// Render prediction panels for a trained plan.
    Viz,
}

impl Cli {
    fn options(&self) -> RunOptions {
        RunOptions {
            tiny: self.tiny,
            allow_fallback: self.allow_fallback,
            panels: self.panels,
            checkpoint: self.checkpoint.clone(),
        }
    }

    fn load_config(&self) -> anyhow::Result<PipelineConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--config <file> is required"))?;
        let mut cfg = PipelineConfig::load(path)?;
        let seed = self.seed.unwrap_or(cfg.seed);
        cfg.apply_seed(seed);
        Ok(cfg)
    }

    fn plan(&self) -> anyhow::Result<Plan> {
        self.plan
            .ok_or_else(|| anyhow::anyhow!("--plan {{axial,coronal,sagittal,unified}} is required for this command"))
    }
}

/// Run one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CommandError> {
    use commands::*;
    let cfg = cli.load_config().exit_code(EXIT_CONFIG)?;
    let opts = cli.options();
    match cli.command {
        Command::Preprocess => cmd_preprocess(&cfg, &opts).map(drop).exit_code(EXIT_PREPROCESS),
        Command::Build => cmd_build(&cfg).map(drop).exit_code(EXIT_BUILD),
        Command::Train => {
            let plan = cli.plan().exit_code(EXIT_CONFIG)?;
            cmd_train(&cfg, plan, &opts).map(drop).exit_code(EXIT_TRAIN)
        }
        Command::Eval => {
            let plan = cli.plan().exit_code(EXIT_CONFIG)?;
            cmd_eval(&cfg, plan, &opts).map(drop).exit_code(EXIT_EVAL)
        }
        Command::Viz => {
            let plan = cli.plan().exit_code(EXIT_CONFIG)?;
            cmd_viz(&cfg, plan, &opts).map(drop).exit_code(EXIT_VIZ)
        }
    }
}
