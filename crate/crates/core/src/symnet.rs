//! Bi-classifier domain-confusion objective: task and domain discrimination
//! for the classifiers, category- and domain-level confusion plus entropy
//! minimization for the feature extractor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::slimnet::{ForwardMode, Head, SlimModel, Trainable};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// One labeled source batch and one unlabeled target batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
}

impl DomainBatch {
    pub fn new(xs: Tensor, ys: Vec<usize>, xt: Tensor) -> Result<Self> {
        let (ns, ds) = xs.require_matrix("source batch")?;
        let (nt, dt) = xt.require_matrix("target batch")?;
        if ns == 0 || nt == 0 {
            return Err(Error::usage("source and target batches must be non-empty"));
        }
        if ds != dt {
            return Err(Error::config(format!("source has {ds} columns, target has {dt}")));
        }
        if ys.len() != ns {
            return Err(Error::config(format!("{} labels for {ns} source rows", ys.len())));
        }
        Ok(DomainBatch { xs, ys, xt })
    }

    pub fn source_len(&self) -> usize {
        self.xs.rows()
    }

    pub fn target_len(&self) -> usize {
        self.xt.rows()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DcLossParts {
    pub task_s: f64,
    pub task_t: f64,
    pub domain_disc: f64,
    pub cat_confusion: f64,
    pub dom_confusion: f64,
    pub entropy_min: f64,
}

impl DcLossParts {
    pub fn task(&self) -> f64 {
        self.task_s + self.task_t
    }

    pub fn confusion(&self) -> f64 {
        self.cat_confusion + self.dom_confusion
    }
}

/// Scalar nodes of the two roles. Which parameters they reach is decided by
/// the [`Trainable`] flags the graph was built with.
#[derive(Clone, Copy, Debug)]
pub struct DcGradTargets {
    pub classifier_loss: NodeId,
    pub extractor_loss: NodeId,
    pub parts: DcLossParts,
}

/// Head outputs shared by every term, computed once per graph.
#[derive(Clone, Copy, Debug)]
pub struct DcHeads {
    pub s_src: NodeId,
    pub t_src: NodeId,
    pub st_src: NodeId,
    pub s_tgt: NodeId,
    pub t_tgt: NodeId,
    pub st_tgt: NodeId,
    /// `(g^s + g^t) / 2` on the target batch.
    pub task_tgt: NodeId,
}

impl DcHeads {
    /// Runs source and target through the extractor as one batch (shared
    /// batchnorm statistics) and evaluates the S, T and 2K-way heads.
    pub fn build(g: &mut Graph, model: &SlimModel<'_>, batch: &DomainBatch, trainable: Trainable) -> Result<(Self, NodeId, NodeId)> {
        let ns = batch.source_len();
        let nt = batch.target_len();
        let x = g.constant(Tensor::vstack(&[&batch.xs, &batch.xt])?);
        let f = model.forward_features(g, x, ForwardMode::Train, trainable)?;
        let fs = g.slice_rows(f, 0..ns)?;
        let ft = g.slice_rows(f, ns..ns + nt)?;
        Ok((Self::from_features(g, model, fs, ft, trainable)?, fs, ft))
    }

    pub fn from_features(g: &mut Graph, model: &SlimModel<'_>, fs: NodeId, ft: NodeId, trainable: Trainable) -> Result<Self> {
        let k = model.store().architecture().class_count;
        let st_src = model.classify(g, fs, Head::ST, trainable)?;
        let st_tgt = model.classify(g, ft, Head::ST, trainable)?;
        let s_src = model.classify(g, fs, Head::S, trainable)?;
        let t_src = model.classify(g, fs, Head::T, trainable)?;
        let s_tgt = model.classify(g, ft, Head::S, trainable)?;
        let t_tgt = model.classify(g, ft, Head::T, trainable)?;
        let sum = g.add(s_tgt, t_tgt)?;
        let task_tgt = g.scale(sum, 0.5)?;
        debug_assert_eq!(g.value(st_src).cols(), 2 * k);
        Ok(DcHeads { s_src, t_src, st_src, s_tgt, t_tgt, st_tgt, task_tgt })
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::usage(format!("label {y} outside [0, {k})")));
        }
        data[i * k + y] = 1.0;
    }
    Tensor::matrix(labels.len(), k, data)
}

/// `-(1/n) Σ_i Σ_k target_ik log clamp(p_ik)`.
pub fn prob_cross_entropy(g: &mut Graph, probs: NodeId, target: NodeId) -> Result<NodeId> {
    let logp = g.log_clamped(probs, PROB_FLOOR)?;
    g.cross_entropy(logp, target)
}

fn ones(g: &mut Graph, rows: usize, cols: usize) -> NodeId {
    g.constant(Tensor::full(&[rows, cols], 1.0))
}

fn half_sums(g: &mut Graph, st: NodeId, k: usize) -> Result<(NodeId, NodeId)> {
    let first = g.slice_cols(st, 0..k)?;
    let second = g.slice_cols(st, k..2 * k)?;
    Ok((g.sum_axis(first, 1)?, g.sum_axis(second, 1)?))
}

/// Task discrimination on the source batch, one term per head:
/// `mean -log g^s_y` and `mean -log g^t_y`.
pub fn task_terms(g: &mut Graph, s_src: NodeId, t_src: NodeId, ys: &[usize]) -> Result<(NodeId, NodeId)> {
    let k = g.value(s_src).cols();
    let y = g.constant(one_hot(ys, k)?);
    Ok((prob_cross_entropy(g, s_src, y)?, prob_cross_entropy(g, t_src, y)?))
}

/// Domain discrimination: source mass belongs in the first K outputs,
/// target mass in the last K.
pub fn domain_disc_term(g: &mut Graph, st_src: NodeId, st_tgt: NodeId) -> Result<NodeId> {
    let k = g.value(st_src).cols() / 2;
    let (src_first, _) = half_sums(g, st_src, k)?;
    let (_, tgt_second) = half_sums(g, st_tgt, k)?;
    let ns = g.value(st_src).rows();
    let nt = g.value(st_tgt).rows();
    let o_s = ones(g, ns, 1);
    let o_t = ones(g, nt, 1);
    let a = prob_cross_entropy(g, src_first, o_s)?;
    let b = prob_cross_entropy(g, tgt_second, o_t)?;
    g.add(a, b)
}

/// Category-level confusion: `-(1/2n_s) Σ [log g^st_y + log g^st_{y+K}]`.
pub fn category_confusion_term(g: &mut Graph, st_src: NodeId, ys: &[usize]) -> Result<NodeId> {
    let k = g.value(st_src).cols() / 2;
    let mut target = vec![0.0; ys.len() * 2 * k];
    for (i, &y) in ys.iter().enumerate() {
        if y >= k {
            return Err(Error::usage(format!("label {y} outside [0, {k})")));
        }
        target[i * 2 * k + y] = 0.5;
        target[i * 2 * k + y + k] = 0.5;
    }
    let t = g.constant(Tensor::matrix(ys.len(), 2 * k, target)?);
    prob_cross_entropy(g, st_src, t)
}

/// Domain-level confusion: `-(1/2n_t) Σ [log Σ_{k≤K} g^st + log Σ_{k>K} g^st]`.
pub fn domain_confusion_term(g: &mut Graph, st_tgt: NodeId) -> Result<NodeId> {
    let k = g.value(st_tgt).cols() / 2;
    let (a, b) = half_sums(g, st_tgt, k)?;
    let halves = g.concat(&[a, b], 1)?;
    let n = g.value(st_tgt).rows();
    let t = g.constant(Tensor::full(&[n, 2], 0.5));
    prob_cross_entropy(g, halves, t)
}

/// Mean row entropy `-(1/n) Σ p log p`.
pub fn entropy_term(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    prob_cross_entropy(g, p, p)
}

/// Builds the whole objective on a graph whose heads are already computed.
pub fn dc_terms(g: &mut Graph, heads: &DcHeads, ys: &[usize], w_ent: f64) -> Result<DcGradTargets> {
    let (task_s, task_t) = task_terms(g, heads.s_src, heads.t_src, ys)?;
    let dd = domain_disc_term(g, heads.st_src, heads.st_tgt)?;
    let cat = category_confusion_term(g, heads.st_src, ys)?;
    let dom = domain_confusion_term(g, heads.st_tgt)?;
    let ent = entropy_term(g, heads.task_tgt)?;
    let task = g.add(task_s, task_t)?;
    let classifier_loss = g.add(task, dd)?;
    let conf = g.add(cat, dom)?;
    let weighted_ent = g.scale(ent, w_ent)?;
    let extractor_loss = g.add(conf, weighted_ent)?;
    let parts = DcLossParts {
        task_s: g.scalar(task_s)?,
        task_t: g.scalar(task_t)?,
        domain_disc: g.scalar(dd)?,
        cat_confusion: g.scalar(cat)?,
        dom_confusion: g.scalar(dom)?,
        entropy_min: g.scalar(ent)?,
    };
    Ok(DcGradTargets { classifier_loss, extractor_loss, parts })
}

/// Full objective for one model. Build with `Trainable { source, target, .. }`
/// and backward `classifier_loss` for the classifier role, or with
/// [`Trainable::EXTRACTOR`] and backward `extractor_loss` for the extractor
/// role; the parameters of the other role enter the graph detached.
pub fn dc_loss(g: &mut Graph, model: &SlimModel<'_>, batch: &DomainBatch, w_ent: f64, trainable: Trainable) -> Result<(DcGradTargets, DcHeads)> {
    if w_ent < 0.0 || !w_ent.is_finite() {
        return Err(Error::config(format!("entropy weight {w_ent} must be a non-negative number")));
    }
    let (heads, _, _) = DcHeads::build(g, model, batch, trainable)?;
    let targets = dc_terms(g, &heads, &batch.ys, w_ent)?;
    Ok((targets, heads))
}

/// Loss values only (no parameters on the graph).
pub fn dc_parts(model: &SlimModel<'_>, batch: &DomainBatch) -> Result<DcLossParts> {
    let mut g = Graph::new();
    Ok(dc_loss(&mut g, model, batch, 0.0, Trainable::NONE)?.0.parts)
}

/// Source-only forward.
pub fn loss_task(model: &SlimModel<'_>, xs: &Tensor, ys: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(xs.clone());
    let f = model.forward_features(&mut g, x, ForwardMode::Train, Trainable::NONE)?;
    let ps = model.classify(&mut g, f, Head::S, Trainable::NONE)?;
    let pt = model.classify(&mut g, f, Head::T, Trainable::NONE)?;
    let (a, b) = task_terms(&mut g, ps, pt, ys)?;
    Ok(g.scalar(a)? + g.scalar(b)?)
}

/// Joint source/target forward.
pub fn loss_domain_disc(model: &SlimModel<'_>, xs: &Tensor, xt: &Tensor) -> Result<f64> {
    let batch = DomainBatch::new(xs.clone(), vec![0; xs.rows()], xt.clone())?;
    Ok(dc_parts(model, &batch)?.domain_disc)
}

/// Joint source/target forward; category plus domain confusion.
pub fn loss_confusion(model: &SlimModel<'_>, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<f64> {
    let batch = DomainBatch::new(xs.clone(), ys.to_vec(), xt.clone())?;
    Ok(dc_parts(model, &batch)?.confusion())
}

/// Target-only forward; entropy of `(g^s + g^t) / 2`.
pub fn loss_entropy_min(model: &SlimModel<'_>, xt: &Tensor) -> Result<f64> {
    let p = model.predict(xt, ForwardMode::Train, Head::Task)?;
    let mut g = Graph::new();
    let pn = g.constant(p);
    let e = entropy_term(&mut g, pn)?;
    g.scalar(e)
}
