//! The single-file run configuration and per-stage seed derivation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::DEFAULT_T_GRID;
use crate::error::{Error, Result};
use crate::evalbench::{default_detectors, DetectorChoice};
use crate::robusttrain::{Method, TrainConfig};
use crate::synthgen::{Family, Task, WorldSpec};
use crate::vqamodel::{AttentionVariant, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: 32, heads: 1, variant: AttentionVariant::Context }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// ID pool size before the train/val/cal split.
    pub n_id: usize,
    pub id_split: [f64; 3],
    /// Anomaly tasks generated in the TRAIN family (fine-tuning and calibration pool).
    pub train_tasks: Vec<Task>,
    pub n_anomaly_train: usize,
    pub n_anomaly_cal: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_id: 5000,
            id_split: [0.8, 0.1, 0.1],
            train_tasks: vec![Task::T1, Task::T2, Task::T4],
            n_anomaly_train: 1000, n_anomaly_cal: 200, n_test: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub t_grid: Vec<f64>,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection { t_grid: DEFAULT_T_GRID.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub data_dir: PathBuf,
    pub detectors: Vec<DetectorChoice>,
    pub sets: Vec<(Task, Family)>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let mut sets: Vec<(Task, Family)> = Task::ANOMALIES.iter().map(|&t| (t, Family::Eval)).collect();
        sets.push((Task::T2, Family::EvalAlt));
        sets.push((Task::T4, Family::EvalAlt));
        EvalSection { data_dir: PathBuf::from("data"), detectors: default_detectors(), sets }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub detect: DetectSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldSpec::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig { epochs: 15, method: Method::Ra, ..TrainConfig::default() },
            detect: DetectSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// A parsed config together with the exact text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub hash: String,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<LoadedConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        config.validate()?;
        Ok(LoadedConfig { config, text: text.to_string(), hash: config_hash(text) })
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.model_config(0).validate()?;
        if self.detect.t_grid.is_empty() || self.detect.t_grid.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("t_grid must be a nonempty list of positive temperatures".into()));
        }
        let s: f64 = self.data.id_split.iter().sum();
        if self.data.id_split.iter().any(|f| !(*f > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config("id_split must be three positive fractions summing to 1".into()));
        }
        if self.data.train_tasks.is_empty() || self.data.train_tasks.contains(&Task::Id) {
            return Err(Error::Config("train_tasks must list at least one anomaly task".into()));
        }
        for ft in [&self.train, &self.finetune] {
            if let Some(t) = ft.sources.iter().find(|t| !self.data.train_tasks.contains(t)) {
                return Err(Error::Config(format!("fine-tuning source {t} is not among data.train_tasks")));
            }
        }
        if self.eval.sets.iter().any(|(t, f)| *t == Task::Id || *f == Family::Train) {
            return Err(Error::Config("eval sets must be anomaly tasks in EVAL or EVAL_ALT families".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, init_seed: u64) -> ModelConfig {
        ModelConfig::for_world(&self.world, self.model.hidden, self.model.heads, self.model.variant, init_seed)
    }
}

pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Seed for a named stage: the first 8 bytes of SHA-256("{seed}:{stage}").
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
