//! Picking widths for a FLOPs budget without target labels: UPEM scoring
//! against the full-width anchor, greedy and random search, and the
//! label-based diagnostics used to validate them.

mod correlation;
mod probe;
mod sampler;
mod strategy;
mod upem;

pub use correlation::{average_ranks, correlate, pearson, spearman, CorrelationReport};
pub use probe::{capacity_rank_correlation, monotonicity_probe, ProbeReport};
pub use sampler::{grow_to_band, spanning_configs, Band, Growth};
pub use strategy::{
    inherited_greedy_search, random_search, search_csv, search_strategies, InheritedGreedy, RandomSearch, RandomSearchResult,
    SearchPlan, SearchRow, SearchStrategy, SEARCH_HEADER,
};
pub use upem::{delta, raw_delta, triangle_check, upem, Candidate, TriangleCheck, UpemEvaluator, UpemScore};

#[cfg(test)]
mod tests;
