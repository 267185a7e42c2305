//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::optim::TrainSchedule;
use crate::tasks::Degradation;
use crate::tensor::DType;
use crate::trainer::{validate_sequence, DataConfig, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default = "TrainSchedule::desk")]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub data: DataConfig,
    pub tasks: Vec<TaskSpec>,
}

impl ExperimentConfig {
    fn default_dtype() -> DType {
        DType::F32
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        validate_sequence(&self.tasks)?;
        let layers = self.network.layer_count();
        for t in &self.tasks {
            if let Some(&l) = t.layer_fractions.keys().find(|&&l| l >= layers) {
                return Err(Error::Config(format!(
                    "task {}: fraction override for layer {l}, network has {layers} layers",
                    t.task_id
                )));
            }
        }
        if self.data.eval_count == 0 {
            return Err(Error::Config("data.eval_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Fully resolved config with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(&json))
    }

    /// Turns knowledge sharing off for every task.
    pub fn disable_sharing(&mut self) {
        for t in &mut self.tasks {
            t.knowledge_sharing = false;
        }
    }

    /// Four-task sequential denoising at σ = 10, 20, 30, 40.
    pub fn noise_sequence() -> Self {
        let tasks = [10.0, 20.0, 30.0, 40.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| TaskSpec::new(i as u32 + 1, format!("denoise_s{s}"), Degradation::noise(s)))
            .collect();
        Self::with_tasks(tasks)
    }

    /// Derain, denoise (σ=50), deblock and deblur with the fixed test-time
    /// settings for evaluation.
    pub fn restoration_sequence() -> Self {
        let mut derain = TaskSpec::new(1, "derain", Degradation::rain_default());
        derain.eval_degradation = None;
        let denoise = TaskSpec::new(2, "denoise", Degradation::noise(50.0));
        let mut deblock = TaskSpec::new(3, "deblock", Degradation::block_train());
        deblock.eval_degradation = Some(Degradation::block_test());
        let mut deblur = TaskSpec::new(4, "deblur", Degradation::blur_train());
        deblur.eval_degradation = Some(Degradation::blur_test());
        Self::with_tasks(vec![derain, denoise, deblock, deblur])
    }

    fn with_tasks(tasks: Vec<TaskSpec>) -> Self {
        Self {
            seed: 0,
            dtype: DType::F32,
            output_dir: None,
            network: NetConfig::default(),
            schedule: TrainSchedule::desk(),
            data: DataConfig::default(),
            tasks,
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
