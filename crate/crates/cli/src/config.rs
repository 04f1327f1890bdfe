use std::path::{Path, PathBuf};

use clap::Args;
use pgdm::data::SyntheticSpec;
use pgdm::pipeline::PipelineConfig;
use pgdm::Execution;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self::under(Path::new("run"))
    }
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Self { data: root.join("data"), checkpoints: root.join("checkpoints"), reports: root.join("reports") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct IngestConfig {
    /// CSV files, or directories whose `*.csv` files are taken in name order.
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElbowConfig {
    /// Largest `p` tried; `0` skips the elbow report.
    pub p_max: usize,
    /// Relative RSS improvement below which adding an archetype stops paying.
    pub threshold: f64,
}

impl Default for ElbowConfig {
    fn default() -> Self {
        Self { p_max: 0, threshold: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ForecastFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synthetic: SyntheticSpec,
    pub ingest: IngestConfig,
    pub elbow: ElbowConfig,
    pub pipeline: PipelineConfig,
}

/// Flags shared by every subcommand. Any flag given wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Puts data, checkpoints and reports under this directory.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Archetype count `p`.
    #[arg(long, global = true)]
    pub archetypes: Option<usize>,
    /// History length `T`.
    #[arg(long, global = true)]
    pub history: Option<usize>,
    /// Horizon length `H`.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Diffusion steps `S`.
    #[arg(long, global = true)]
    pub diffusion_steps: Option<usize>,
    #[arg(long, global = true)]
    pub w_bar: Option<f64>,
    #[arg(long, global = true)]
    pub w_star_bar: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Forecast samples per window `K`.
    #[arg(long, visible_alias = "samples", global = true)]
    pub num_samples: Option<usize>,
    #[arg(long, global = true)]
    pub max_eval_windows: Option<usize>,
    #[arg(long, global = true)]
    pub predictor_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub denoiser_steps: Option<usize>,
    /// Disables the data-parallel paths.
    #[arg(long, global = true)]
    pub sequential: bool,
}

impl RunConfig {
    pub fn load(ov: &Overrides) -> Result<Self> {
        let mut cfg = match &ov.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::json(path, e))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) {
        if let Some(dir) = &ov.workdir {
            self.paths = Paths::under(dir);
        }
        let p = &mut self.pipeline;
        if let Some(v) = ov.seed {
            p.seed = v;
        }
        if let Some(v) = ov.archetypes {
            p.archetypes = v;
        }
        if let Some(v) = ov.history {
            p.history = v;
        }
        if let Some(v) = ov.horizon {
            p.horizon = v;
        }
        if let Some(v) = ov.diffusion_steps {
            p.diffusion_steps = v;
        }
        if let Some(v) = ov.w_bar {
            p.guidance.w_bar = v;
        }
        if let Some(v) = ov.w_star_bar {
            p.guidance.w_star_bar = v;
        }
        if let Some(v) = ov.gamma {
            p.guidance.gamma = v;
        }
        if let Some(v) = ov.num_samples {
            p.samples = v;
        }
        if let Some(v) = ov.max_eval_windows {
            p.max_eval_windows = v;
        }
        if let Some(v) = ov.predictor_epochs {
            p.predictor.max_epochs = v;
        }
        if let Some(v) = ov.denoiser_steps {
            p.denoiser.train_steps = v;
        }
        if ov.sequential {
            p.exec = Execution::Sequential;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synthetic.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pipeline.schedule().map_err(|e| CliError::Config(e.to_string()))?;
        if self.elbow.p_max > 0 && !(self.elbow.threshold > 0.0 && self.elbow.threshold < 1.0) {
            return Err(CliError::Config("elbow.threshold must lie in (0, 1)".into()));
        }
        for input in &self.ingest.inputs {
            if !input.exists() {
                return Err(CliError::Config(format!("ingest input {} does not exist", input.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"pipeline": {"seed": 4, "guidance": {"w_bar": 2.0}}}"#).unwrap();
        assert_eq!(cfg.pipeline.seed, 4);
        assert_eq!(cfg.pipeline.guidance.w_bar, 2.0);
        assert_eq!(cfg.pipeline.guidance.gamma, 0.1);
        assert_eq!(cfg.paths, Paths::default());
    }

    #[test]
    fn flags_win() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.seed = 3;
        let ov = Overrides { seed: Some(9), w_bar: Some(0.0), workdir: Some("x".into()), ..Default::default() };
        cfg.apply(&ov);
        assert_eq!(cfg.pipeline.seed, 9);
        assert_eq!(cfg.pipeline.guidance.w_bar, 0.0);
        assert_eq!(cfg.paths.data, Path::new("x/data"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.pipeline.guidance.gamma = 0.0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.pipeline.diffusion_steps = 10;
        assert!(cfg.validate().is_err());
    }
}
