use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::accuracy;
use crate::slimnet::{ForwardMode, Head, ParamStore, SlimModel, WidthConfig};
use crate::symnet::one_hot;

/// Distance of one candidate's target predictions from the anchor's.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpemScore {
    pub config: WidthConfig,
    pub delta: f64,
    pub flops_ratio: f64,
}

fn check_pair(candidate: &Tensor, anchor: &Tensor) -> Result<()> {
    if candidate.shape() != anchor.shape() || candidate.shape().len() != 2 || candidate.rows() == 0 {
        return Err(Error::usage(format!(
            "cannot compare predictions of shape {:?} with {:?}",
            candidate.shape(),
            anchor.shape()
        )));
    }
    Ok(())
}

/// Squared Frobenius distance between two prediction matrices.
pub fn raw_delta(candidate: &Tensor, anchor: &Tensor) -> Result<f64> {
    check_pair(candidate, anchor)?;
    Ok(candidate.data().iter().zip(anchor.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// [`raw_delta`] divided by the number of target samples.
pub fn delta(candidate: &Tensor, anchor: &Tensor) -> Result<f64> {
    Ok(raw_delta(candidate, anchor)? / candidate.rows() as f64)
}

/// Scores `candidate` against `anchor`, both of which must already carry
/// batchnorm statistics recalibrated on `xt`.
pub fn upem(candidate: &SlimModel<'_>, anchor: &SlimModel<'_>, xt: &Tensor, head: Head) -> Result<UpemScore> {
    for (what, m) in [("candidate", candidate), ("anchor", anchor)] {
        match m.bn() {
            Some(s) if s.samples == xt.rows() => {}
            Some(s) => {
                return Err(Error::usage(format!(
                    "{what} was recalibrated on {} samples, scoring data has {}",
                    s.samples,
                    xt.rows()
                )))
            }
            None => return Err(Error::usage(format!("{what} has not been recalibrated on the target data"))),
        }
    }
    let p = candidate.predict(xt, ForwardMode::Eval, head)?;
    let q = anchor.predict(xt, ForwardMode::Eval, head)?;
    let full = anchor.store().architecture().full_flops();
    Ok(UpemScore { config: candidate.config().clone(), delta: delta(&p, &q)?, flops_ratio: candidate.config().flops / full })
}

/// A scored config together with its predictions on the target set.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub score: UpemScore,
    pub predictions: Tensor,
    /// Filled only when the evaluator was given held-out labels.
    pub accuracy: Option<f64>,
}

/// Caches the recalibrated full-width anchor so each candidate costs one
/// recalibration and one forward pass.
pub struct UpemEvaluator<'a> {
    store: &'a ParamStore,
    xt: &'a Tensor,
    head: Head,
    batch_size: usize,
    anchor: Tensor,
    labels: Option<&'a [usize]>,
}

impl<'a> UpemEvaluator<'a> {
    pub fn new(store: &'a ParamStore, xt: &'a Tensor, head: Head, batch_size: usize) -> Result<Self> {
        let mut anchor = SlimModel::slice(store, &store.architecture().full_config())?;
        let anchor = anchor.recalibrate_and_predict(xt, batch_size, head)?;
        Ok(UpemEvaluator { store, xt, head, batch_size, anchor, labels: None })
    }

    /// Attaches held-out labels so candidates also report accuracy. Scores
    /// and selection never look at them.
    pub fn with_eval_labels(mut self, labels: &'a [usize]) -> Result<Self> {
        if labels.len() != self.xt.rows() {
            return Err(Error::usage(format!("{} labels for {} target samples", labels.len(), self.xt.rows())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn anchor_predictions(&self) -> &Tensor {
        &self.anchor
    }

    pub fn evaluate(&self, config: &WidthConfig) -> Result<Candidate> {
        let mut model = SlimModel::slice(self.store, config)?;
        let predictions = model.recalibrate_and_predict(self.xt, self.batch_size, self.head)?;
        let d = delta(&predictions, &self.anchor)?;
        let flops_ratio = model.config().flops / self.store.architecture().full_flops();
        let accuracy = self.labels.map(|y| accuracy(&predictions, y)).transpose()?;
        Ok(Candidate { score: UpemScore { config: model.config().clone(), delta: d, flops_ratio }, predictions, accuracy })
    }

    pub fn score(&self, config: &WidthConfig) -> Result<UpemScore> {
        self.evaluate(config).map(|c| c.score)
    }
}

/// Both sides of `‖g_j − GT‖ ≤ ‖g − GT‖ + ‖g_j − g‖` in unnormalized
/// Frobenius norms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleCheck {
    pub candidate_error: f64,
    pub anchor_error: f64,
    pub distance: f64,
}

impl TriangleCheck {
    pub fn holds(&self) -> bool {
        self.candidate_error <= self.anchor_error + self.distance + 1e-12 * (1.0 + self.anchor_error + self.distance)
    }
}

pub fn triangle_check(candidate: &Tensor, anchor: &Tensor, labels: &[usize]) -> Result<TriangleCheck> {
    check_pair(candidate, anchor)?;
    let gt = one_hot(labels, candidate.cols())?;
    Ok(TriangleCheck {
        candidate_error: raw_delta(candidate, &gt)?.sqrt(),
        anchor_error: raw_delta(anchor, &gt)?.sqrt(),
        distance: raw_delta(candidate, anchor)?.sqrt(),
    })
}
