//! Joint training of the width bank: model-batch sampling, confidence
//! weighting, ensemble distillation, and the interchangeable update rules.

mod batch;
mod distill;
mod strategy;
mod trainer;

pub use batch::{confidence, sample_config, sample_model_batch, ConfidenceMode, ConfidencePolicy, ModelBatch};
pub use distill::{ensemble, seed_loss_terms, sharpen};
pub use strategy::{train_strategies, Baseline, Inplaced, SlimDa, StepContext, StepReport, StepSettings, StepTrace, TrainStrategy};
pub use trainer::{metrics_csv, EpochMetrics, TrainOptions, Trainer, TrainerConfig, METRICS_HEADER};

#[cfg(test)]
mod tests;
