//! Experiment configuration and the work behind each subcommand. Every
//! file a command writes lands in the configured output directory.

mod commands;
mod config;

pub use commands::{
    correlate, eval, eval_csv, gen_data, initial_store, load_bank, parse_budgets, search, train, CorrelateOutcome, DataSummary,
    EvalRow, Overrides, TrainFlags, TrainOutcome, CORRELATION_HEADER, EVAL_HEADER, PAIRS_HEADER,
};
pub use config::{EvalPlan, ExperimentConfig};
