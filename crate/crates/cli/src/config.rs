use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmq_core::experiments::{GridSpec, ProbePlan};
use mmq_core::pipeline::PipelineSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const WORKERS_ENV: &str = "MMQ_WORKERS";

fn default_probes() -> ProbePlan {
    ProbePlan { seed: 0, count: 32 }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("mmq-out")
}

fn default_workers() -> usize {
    1
}

/// Everything a run needs besides the command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_probes")]
    pub probes: ProbePlan,
    /// Probe pairs whose activations calibrate GPTQ and AWQ.
    #[serde(default)]
    pub calibration: Option<ProbePlan>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("invalid config at '{path}': {}", e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().context("invalid pipeline")?;
        self.grid.validate().context("invalid grid")?;
        if self.probes.count == 0 {
            bail!("probes.count must be at least 1");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }

    /// Worker count after the environment override.
    pub fn effective_workers(&self) -> Result<usize> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => bail!("{WORKERS_ENV} must be a positive integer, got '{v}'"),
            },
            Err(_) => Ok(self.workers),
        }
    }

    pub fn calibration_or_fail(&self) -> Result<&ProbePlan> {
        self.calibration.as_ref().context("calibration probes required: add a \"calibration\" section to the config")
    }

    /// SHA-256 of the canonical JSON form of the parsed config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
