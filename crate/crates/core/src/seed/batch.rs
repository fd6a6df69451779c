use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slimnet::{Architecture, WidthConfig};

/// The configs trained together in one iteration, widest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch {
    configs: Vec<WidthConfig>,
    /// FLOPs relative to the full-width model.
    ratios: Vec<f64>,
}

impl ModelBatch {
    /// Sorts by FLOPs, descending (stable for ties).
    pub fn from_configs(arch: &Architecture, mut configs: Vec<WidthConfig>) -> Result<Self> {
        if configs.len() < 2 {
            return Err(Error::usage("a model batch needs at least two models"));
        }
        for c in &configs {
            arch.check_widths(&c.widths)?;
        }
        configs.sort_by(|a, b| b.flops.total_cmp(&a.flops));
        let full = arch.full_flops();
        let ratios = configs.iter().map(|c| c.flops / full).collect();
        Ok(ModelBatch { configs, ratios })
    }

    pub fn configs(&self) -> &[WidthConfig] {
        &self.configs
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Full width, 1/8 channels, and `m - 2` configs whose block widths are
/// drawn uniformly from each block's legal range.
pub fn sample_model_batch(rng: &mut impl Rng, arch: &Architecture, m: usize) -> Result<ModelBatch> {
    if m < 2 {
        return Err(Error::usage(format!("model batch size {m} is below 2")));
    }
    let mut configs = vec![arch.full_config(), arch.smallest_config()];
    for _ in 2..m {
        configs.push(sample_config(rng, arch));
    }
    ModelBatch::from_configs(arch, configs)
}

pub fn sample_config(rng: &mut impl Rng, arch: &Architecture) -> WidthConfig {
    let widths = (0..arch.blocks())
        .map(|b| {
            let (lo, hi) = arch.width_range(b);
            rng.random_range(lo..=hi)
        })
        .collect();
    arch.config(widths).expect("sampled inside the legal range")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    Hard,
    General,
}

/// How capacity ratios become distillation/adaptation weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePolicy {
    pub lambda: f64,
    pub s: f64,
    pub mode: ConfidenceMode,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        ConfidencePolicy { lambda: 0.5, s: 0.0, mode: ConfidenceMode::Hard }
    }
}

impl ConfidencePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::config(format!("confidence exponent s {} outside [0, 1]", self.s)));
        }
        Ok(())
    }

    /// HARD: `1` when `r >= lambda`, else `0`.
    /// GENERAL: `0.5 sign(2r-1) |2r-1|^s + 0.5`, which does not involve lambda.
    pub fn weight(&self, r: f64) -> f64 {
        match self.mode {
            ConfidenceMode::Hard => {
                if r >= self.lambda {
                    1.0
                } else {
                    0.0
                }
            }
            ConfidenceMode::General => {
                let a = 2.0 * r - 1.0;
                let sign = if a > 0.0 {
                    1.0
                } else if a < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                0.5 * sign * a.abs().powf(self.s) + 0.5
            }
        }
    }
}

pub fn confidence(batch: &ModelBatch, policy: &ConfidencePolicy) -> Vec<f64> {
    batch.ratios().iter().map(|&r| policy.weight(r)).collect()
}
