use rand::Rng;

use super::correlation::spearman;
use super::sampler::spanning_configs;
use crate::error::{Error, Result};
use crate::eval::LabeledTarget;
use crate::slimnet::{Head, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub spearman: f64,
    /// `(flops, accuracy)` per sampled config.
    pub samples: Vec<(f64, f64)>,
}

/// Rank correlation between capacity and target accuracy over `n`
/// configs spread across the FLOPs range.
pub fn monotonicity_probe(
    store: &ParamStore,
    target: LabeledTarget<'_>,
    head: Head,
    batch_size: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ProbeReport> {
    if n < 3 {
        return Err(Error::usage(format!("monotonicity probe needs at least 3 configs, got {n}")));
    }
    let configs = spanning_configs(store.architecture(), n, 0.02, 64, rng)?;
    let samples = configs
        .iter()
        .map(|c| Ok((c.flops, target.accuracy(store, c, head, batch_size)?)))
        .collect::<Result<Vec<_>>>()?;
    let (f, a): (Vec<f64>, Vec<f64>) = samples.iter().copied().unzip();
    Ok(ProbeReport { spearman: spearman(&f, &a)?, samples })
}

/// Same as [`monotonicity_probe`] but over explicit `(flops, accuracy)` pairs.
pub fn capacity_rank_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    let (f, a): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    spearman(&f, &a)
}
