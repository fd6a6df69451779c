use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sampler::{grow_to_band, Band};
use super::upem::{Candidate, UpemEvaluator};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::slimnet::Architecture;

/// Budget ladder and sampling effort for a search run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchPlan {
    /// Number of equal FLOPs increments between the smallest and full config.
    pub k: usize,
    /// Greedy candidates per step.
    pub q: usize,
    /// Random-search samples per budget.
    pub random_n: usize,
    /// Relative FLOPs tolerance around each budget.
    pub tolerance: f64,
    /// Random directions tried per candidate before settling for the closest.
    pub attempts: usize,
    /// Explicit budget ratios of full FLOPs, replacing the equal ladder.
    pub budgets: Option<Vec<f64>>,
}

impl Default for SearchPlan {
    fn default() -> Self {
        SearchPlan { k: 6, q: 20, random_n: 100, tolerance: 0.02, attempts: 64, budgets: None }
    }
}

impl SearchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.q == 0 || self.random_n == 0 || self.attempts == 0 {
            return Err(Error::config("search plan k, q, random_n and attempts must be at least 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::config(format!("search tolerance {} outside (0, 1)", self.tolerance)));
        }
        if let Some(b) = &self.budgets {
            if b.is_empty() {
                return Err(Error::config("explicit budget list is empty"));
            }
            if b.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("budget ratios must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Budgets in FLOPs, increasing. Without explicit ratios the gap between
    /// the smallest and full config is split into `k` equal parts.
    pub fn ladder(&self, arch: &Architecture) -> Result<Vec<f64>> {
        self.validate()?;
        let lo = arch.smallest_config().flops;
        let full = arch.full_flops();
        match &self.budgets {
            None => Ok((1..=self.k).map(|i| lo + (full - lo) * i as f64 / self.k as f64).collect()),
            Some(ratios) => ratios
                .iter()
                .map(|&r| {
                    let f = r * full;
                    if !(r <= 1.0 && f >= lo * (1.0 - self.tolerance)) {
                        return Err(Error::config(format!(
                            "budget ratio {r} outside [{:.6}, 1]",
                            lo / full
                        )));
                    }
                    Ok(f)
                })
                .collect(),
        }
    }
}

/// One line of a search report.
#[derive(Clone, Debug)]
pub struct SearchRow {
    pub step: usize,
    pub budget: f64,
    pub budget_ratio: f64,
    pub candidate: Candidate,
    pub saturated: bool,
}

pub trait SearchStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, evaluator: &UpemEvaluator<'_>, plan: &SearchPlan, rng: &mut ChaCha8Rng) -> Result<Vec<SearchRow>>;
}

pub fn search_strategies() -> Registry<dyn SearchStrategy> {
    let mut r: Registry<dyn SearchStrategy> = Registry::new("search strategy");
    r.register("greedy", Arc::new(InheritedGreedy)).expect("fresh registry");
    r.register("random", Arc::new(RandomSearch)).expect("fresh registry");
    r
}

fn min_delta(cands: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in cands.iter().enumerate() {
        if c.score.delta < cands[best].score.delta {
            best = i;
        }
    }
    best
}

/// Starts from the 1/8-channel config; at each budget the `q` candidates
/// widen the previous winner and the lowest-UPEM one becomes the next base.
pub struct InheritedGreedy;

impl SearchStrategy for InheritedGreedy {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn run(&self, evaluator: &UpemEvaluator<'_>, plan: &SearchPlan, rng: &mut ChaCha8Rng) -> Result<Vec<SearchRow>> {
        inherited_greedy_search(evaluator, plan, rng)
    }
}

pub fn inherited_greedy_search(evaluator: &UpemEvaluator<'_>, plan: &SearchPlan, rng: &mut ChaCha8Rng) -> Result<Vec<SearchRow>> {
    let arch = evaluator.store().architecture();
    let full = arch.full_flops();
    let mut base = arch.smallest_config().widths;
    let mut rows = Vec::new();
    for (i, budget) in plan.ladder(arch)?.into_iter().enumerate() {
        let band = Band { target: budget, tolerance: plan.tolerance };
        let mut cands = Vec::with_capacity(plan.q);
        let mut saturated = false;
        for _ in 0..plan.q {
            let g = grow_to_band(arch, &base, band, plan.attempts, rng)?;
            saturated |= g.saturated;
            cands.push(evaluator.evaluate(&g.config)?);
            if g.saturated {
                break;
            }
        }
        let winner = cands.swap_remove(min_delta(&cands));
        base = winner.score.config.widths.clone();
        rows.push(SearchRow { step: i + 1, budget, budget_ratio: budget / full, candidate: winner, saturated });
    }
    Ok(rows)
}

/// Independent uniform-direction samples in each budget band; every sample
/// is reported.
pub struct RandomSearch;

impl SearchStrategy for RandomSearch {
    fn name(&self) -> &'static str {
        "random"
    }

    fn run(&self, evaluator: &UpemEvaluator<'_>, plan: &SearchPlan, rng: &mut ChaCha8Rng) -> Result<Vec<SearchRow>> {
        let arch = evaluator.store().architecture();
        let full = arch.full_flops();
        let mut rows = Vec::new();
        for (i, budget) in plan.ladder(arch)?.into_iter().enumerate() {
            let result = random_search(evaluator, budget, plan.random_n, plan.tolerance, plan.attempts, rng)?;
            rows.extend(result.candidates.into_iter().map(|c| SearchRow {
                step: i + 1,
                budget,
                budget_ratio: budget / full,
                candidate: c,
                saturated: false,
            }));
        }
        Ok(rows)
    }
}

#[derive(Clone, Debug)]
pub struct RandomSearchResult {
    pub best: usize,
    pub candidates: Vec<Candidate>,
}

impl RandomSearchResult {
    pub fn winner(&self) -> &Candidate {
        &self.candidates[self.best]
    }
}

/// `n` configs inside the ±`tolerance` band around `budget`, scored by
/// UPEM. Fails if `attempts` random directions cannot hit the band.
pub fn random_search(
    evaluator: &UpemEvaluator<'_>,
    budget: f64,
    n: usize,
    tolerance: f64,
    attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RandomSearchResult> {
    let arch = evaluator.store().architecture();
    let (lo, hi) = (arch.smallest_config().flops, arch.full_flops());
    if n == 0 {
        return Err(Error::usage("random search needs at least one sample"));
    }
    if !(budget >= lo * (1.0 - tolerance) && budget <= hi * (1.0 + tolerance)) {
        return Err(Error::usage(format!("budget {budget} outside [{lo}, {hi}]")));
    }
    let band = Band { target: budget, tolerance };
    let smallest = arch.smallest_config().widths;
    let mut candidates = Vec::with_capacity(n);
    for _ in 0..n {
        let g = grow_to_band(arch, &smallest, band, attempts, rng)?;
        if !g.in_band {
            return Err(Error::Search(format!(
                "no config within {:.1}% of {budget} FLOPs after {attempts} attempts",
                100.0 * tolerance
            )));
        }
        candidates.push(evaluator.evaluate(&g.config)?);
    }
    Ok(RandomSearchResult { best: min_delta(&candidates), candidates })
}

pub const SEARCH_HEADER: &str = "step,budget_ratio,widths,delta,flops";

/// Report CSV; the accuracy column appears only when every row has one.
pub fn search_csv(rows: &[SearchRow]) -> String {
    let labeled = !rows.is_empty() && rows.iter().all(|r| r.candidate.accuracy.is_some());
    let mut out = String::from(SEARCH_HEADER);
    if labeled {
        out.push_str(",accuracy");
    }
    out.push('\n');
    for r in rows {
        let s = &r.candidate.score;
        write!(out, "{},{:.6},{},{:.10e},{:.0}", r.step, r.budget_ratio, s.config.label(), s.delta, s.config.flops).unwrap();
        if let (true, Some(a)) = (labeled, r.candidate.accuracy) {
            write!(out, ",{a:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}
