//! Experiment configuration: one TOML file describing data, backend and
//! training, plus where runs are written.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segadapt::adapt::{PretrainConfig, TrainConfig};
use segadapt::data::{AnnotationFormat, DatasetManifest};
use segadapt::model::BackendConfig;

/// Overrides the configured output directory.
pub const RUN_ROOT_ENV: &str = "SEGADAPT_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Run directory name under the run root; derived when absent.
    #[serde(default)]
    pub run_name: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetManifest,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

fn default_output_dir() -> PathBuf {
    "runs".into()
}

impl ExperimentConfig {
    /// Reads a config; relative paths inside it are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        if cfg.dataset.format != AnnotationFormat::Synthetic {
            cfg.dataset.root = resolve(&cfg.dataset.root);
        }
        cfg.output_dir = resolve(&cfg.output_dir);
        if let Some(w) = cfg.backend.pretrained_weights_path.take() {
            cfg.backend.pretrained_weights_path = Some(resolve(&w));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize config")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.dataset.split_ratio) {
            bail!("dataset.split_ratio must lie in [0, 1]");
        }
        if self.dataset.format != AnnotationFormat::Synthetic && !self.dataset.root.exists() {
            bail!("dataset path {} does not exist", self.dataset.root.display());
        }
        Ok(())
    }

    pub fn run_root(&self) -> PathBuf {
        std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        let name = self.run_name.clone().unwrap_or_else(|| {
            format!(
                "{}-{}-{}-s{}",
                self.dataset.name,
                command,
                self.train.prompt_type.as_str(),
                self.train.seed
            )
        });
        self.run_root().join(name)
    }
}
