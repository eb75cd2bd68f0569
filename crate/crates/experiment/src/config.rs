//! Experiment configuration loaded from TOML or JSON.

use std::path::{Path, PathBuf};

use cvt_core::data::{DatasetName, SyntheticSpec};
use cvt_core::evaluation::Protocol;
use cvt_core::model::CvtConfig;
use cvt_core::trainer::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::ExperimentError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    pub synthetic: SyntheticSpec,
    pub num_tasks: usize,
    /// Overrides `train.buffer_capacity`.
    pub buffer_capacity: usize,
    pub protocols: Vec<Protocol>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// `train.seed` and `train.ablation` are replaced per run.
    pub train: TrainConfig,
    pub model: CvtConfig,
    pub save_checkpoints: bool,
    /// Not part of the embedded provenance record.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetName::Synthetic10,
            synthetic: SyntheticSpec::default(),
            num_tasks: 5,
            buffer_capacity: 200,
            protocols: Protocol::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            methods: vec![Method::Cvt],
            train: TrainConfig::default(),
            model: CvtConfig::default(),
            save_checkpoints: true,
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a `.toml` or `.json` file (chosen by extension, TOML otherwise).
    pub fn from_file(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty".into());
        }
        if self.protocols.is_empty() {
            return fail("protocols must not be empty".into());
        }
        if self.num_tasks == 0 {
            return fail("num_tasks must be positive".into());
        }
        if let DatasetName::Synthetic10 = self.dataset {
            if self.model.num_classes != 10 {
                return fail(format!("synthetic-10 needs model.num_classes = 10, got {}", self.model.num_classes));
            }
            if self.model.image_size != 16 || self.model.in_channels != 3 {
                return fail("synthetic-10 images are 3x16x16".into());
            }
            if self.num_tasks > 10 || 10 % self.num_tasks != 0 {
                return fail(format!("{} tasks do not evenly divide 10 classes", self.num_tasks));
            }
        }
        self.model.validate()?;
        self.train_config(self.seeds[0], self.methods[0]).validate()?;
        Ok(())
    }

    /// Training configuration of one run.
    pub fn train_config(&self, seed: u64, method: Method) -> TrainConfig {
        TrainConfig {
            buffer_capacity: self.buffer_capacity,
            ablation: method.ablation(),
            seed,
            ..self.train.clone()
        }
    }
}
