use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::symnet::{one_hot, prob_cross_entropy};

/// Confidence-weighted average of per-model task predictions
/// (`(g^s + g^t)/2` on the target batch), weights normalized to sum 1.
pub fn ensemble(predictions: &[Tensor], confidences: &[f64]) -> Result<Tensor> {
    if predictions.len() != confidences.len() || predictions.is_empty() {
        return Err(Error::usage("ensemble needs one confidence per prediction"));
    }
    if confidences.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(Error::usage("confidences must be finite and non-negative"));
    }
    let total: f64 = confidences.iter().sum();
    if total <= 0.0 {
        return Err(Error::usage("ensemble invariant violated: every confidence is zero"));
    }
    let mut out = Tensor::zeros(predictions[0].shape());
    for (p, c) in predictions.iter().zip(confidences) {
        if *c > 0.0 {
            out.axpy(c / total, p)?;
        }
    }
    Ok(out)
}

/// Row-wise `p^(1/tau)` renormalized. Computed in log space so tiny
/// probabilities raised to large powers do not underflow the whole row.
pub fn sharpen(p: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::usage(format!("temperature {tau} must be positive")));
    }
    let (_, k) = p.require_matrix("sharpen input")?;
    let mut out = p.clone();
    for row in out.data_mut().chunks_mut(k) {
        let logs: Vec<f64> = row.iter().map(|v| if *v > 0.0 { v.ln() / tau } else { f64::NEG_INFINITY }).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::numeric("cannot sharpen an all-zero row"));
        }
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        row.iter_mut().zip(&logs).for_each(|(v, l)| *v = (l - max).exp() / sum);
    }
    Ok(out)
}

/// Distillation objective for one model's auxiliary head: cross-entropy to
/// the (constant) ensemble target on the target batch plus cross-entropy to
/// the labels on the source batch.
pub fn seed_loss_terms(g: &mut Graph, aux_tgt: NodeId, aux_src: NodeId, g_seed: &Tensor, ys: &[usize]) -> Result<NodeId> {
    let k = g.value(aux_src).cols();
    let target = g.constant(g_seed.clone());
    let labels = g.constant(one_hot(ys, k)?);
    let a = prob_cross_entropy(g, aux_tgt, target)?;
    let b = prob_cross_entropy(g, aux_src, labels)?;
    g.add(a, b)
}
