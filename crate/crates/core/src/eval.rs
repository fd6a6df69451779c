//! Target-domain evaluation after per-width batchnorm recalibration.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::slimnet::{Head, ParamStore, SlimModel, WidthConfig};

/// AdaBN on `xt`, then EVAL-mode predictions of `head` on `xt`.
pub fn adapted_predictions(store: &ParamStore, config: &WidthConfig, xt: &Tensor, head: Head, batch_size: usize) -> Result<Tensor> {
    let mut model = SlimModel::slice(store, config)?;
    model.recalibrate_and_predict(xt, batch_size, head)
}

pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::usage(format!("{} predictions for {} labels", probs.rows(), labels.len())));
    }
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Held-out target labels, available only on evaluation paths.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTarget<'a> {
    pub xt: &'a Tensor,
    pub yt: &'a [usize],
}

impl LabeledTarget<'_> {
    pub fn accuracy(&self, store: &ParamStore, config: &WidthConfig, head: Head, batch_size: usize) -> Result<f64> {
        accuracy(&adapted_predictions(store, config, self.xt, head, batch_size)?, self.yt)
    }
}
