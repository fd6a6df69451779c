use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GeneratorSpec;
use crate::error::{Error, Result};
use crate::search::SearchPlan;
use crate::seed::TrainerConfig;
use crate::slimnet::Architecture;

/// Widths to report in `eval` and effort for `correlate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPlan {
    /// Width labels such as `16-32-64-128`; empty means full and 1/8 channels.
    pub widths: Vec<String>,
    /// Configs sampled per budget band by `correlate`.
    pub correlate_samples: usize,
    /// Chunk size for batchnorm recalibration.
    pub batch_size: usize,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan { widths: Vec::new(), correlate_samples: 100, batch_size: 256 }
    }
}

/// Everything one run depends on. Sections left out take their defaults;
/// a section that is present must spell out its required fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub dataset: GeneratorSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub search: SearchPlan,
    #[serde(default)]
    pub evaluation: EvalPlan,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: default_out(),
            architecture: Architecture::default(),
            dataset: GeneratorSpec::default(),
            trainer: TrainerConfig::default(),
            search: SearchPlan::default(),
            evaluation: EvalPlan::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.dataset.validate()?;
        self.trainer.validate()?;
        self.search.validate()?;
        if self.dataset.dim != self.architecture.input_dim || self.dataset.classes != self.architecture.class_count {
            return Err(Error::config(format!(
                "dataset has dim {} and {} classes but architecture expects {} and {}",
                self.dataset.dim, self.dataset.classes, self.architecture.input_dim, self.architecture.class_count
            )));
        }
        if self.evaluation.batch_size == 0 {
            return Err(Error::config("evaluation.batch_size must be at least 1"));
        }
        if self.evaluation.correlate_samples < 3 {
            return Err(Error::config("evaluation.correlate_samples must be at least 3"));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
}
