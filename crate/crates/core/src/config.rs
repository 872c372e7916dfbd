//! Experiment configuration: one TOML document per experiment.
//!
//! Sections appear in a fixed order (`experiment`, `model`, `local`,
//! `pretrain`, `data`) and keys within a section follow struct field order,
//! so `to_toml(from_toml(s)) == s` for any file this module wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{FatError, Result};
use crate::federation::{AggregationMode, FederationConfig};
use crate::model::ArchDescriptor;
use crate::rng;
use crate::trainer::LocalTrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub mode: AggregationMode,
    /// Root of every random stream: data, initialization, local training.
    pub seed: u64,
    pub total_rounds: usize,
    pub alternation_period: usize,
    pub eval_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_rounds: Option<usize>,
    /// Warm-start checkpoint; relative paths resolve against the config
    /// file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Write measured round times to the CSV `wall_ms` column. Off by
    /// default so that metrics files are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    /// Rounds of centralized supervised training on the source set.
    pub rounds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ArchDescriptor,
    pub local: LocalTrainConfig,
    pub pretrain: PretrainSection,
    pub data: DatasetSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        ExperimentConfig {
            experiment: ExperimentSection {
                mode: fed.mode,
                seed: 0,
                total_rounds: fed.total_rounds,
                alternation_period: fed.alternation_period,
                eval_every: fed.eval_every,
                warmup_rounds: None,
                pretrain_checkpoint: None,
                output_dir: None,
                record_wall_time: false,
            },
            model: ArchDescriptor::default(),
            local: fed.local,
            pretrain: PretrainSection { rounds: 10 },
            data: DatasetSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| FatError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FatError::Config(e.to_string()))
    }

    /// Reads and validates a config file. A relative `pretrain_checkpoint`
    /// is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FatError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(ckpt), Some(dir)) = (&cfg.experiment.pretrain_checkpoint, path.parent()) {
            if ckpt.is_relative() {
                cfg.experiment.pretrain_checkpoint = Some(dir.join(ckpt));
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.experiment.seed = seed;
        c
    }

    pub fn with_mode(&self, mode: AggregationMode) -> Self {
        let mut c = self.clone();
        c.experiment.mode = mode;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| FatError::Config(e.to_string()))?;
        self.data.validate()?;
        self.federation().local.validate()?;
        let e = &self.experiment;
        if e.total_rounds < 1 || e.alternation_period < 1 || e.eval_every < 1 {
            return Err(FatError::Config("total_rounds, alternation_period and eval_every must be >= 1".into()));
        }
        if self.model.n_classes != self.data.n_classes || self.model.in_channels != 1 {
            return Err(FatError::Config(format!(
                "model {:?} does not fit single-channel data with {} classes",
                self.model, self.data.n_classes
            )));
        }
        let need = 2 * self.local.batch_size;
        if let Some((i, n)) = self.data.samples_per_silo.iter().enumerate().find(|(_, &n)| n < need) {
            return Err(FatError::Config(format!(
                "silo {i} has {n} samples; at least 2 x batch_size = {need} are required"
            )));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.experiment.seed,
            ..self.data.clone()
        }
    }

    pub fn federation(&self) -> FederationConfig {
        let e = &self.experiment;
        FederationConfig {
            mode: e.mode,
            total_rounds: e.total_rounds,
            alternation_period: e.alternation_period,
            eval_every: e.eval_every,
            warmup_rounds: e.warmup_rounds,
            seed: e.seed,
            local: self.local.clone(),
        }
    }

    pub fn init_seed(&self) -> u64 {
        rng::derive_seed(self.experiment.seed, "init", &[])
    }

    pub fn pretrain_seed(&self, round: usize) -> u64 {
        rng::derive_seed(self.experiment.seed, "pretrain", &[round as u64])
    }
}
