use serde::{Deserialize, Serialize};

use super::arch::WidthConfig;
use super::store::{Classifier, ParamStore};
use crate::autodiff::{column_moments, gemm, BnMode, Graph, NodeId, ParamId, Tensor, BN_EPS};
use crate::error::{Error, Result};

/// Probability outputs a model can produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// Softmax of `C^s` over K classes.
    S,
    /// Softmax of `C^t` over K classes.
    T,
    /// Softmax of `C^a` over K classes.
    A,
    /// Softmax over the 2K concatenated `C^s | C^t` logits.
    ST,
    /// Mean of the `S` and `T` distributions.
    Task,
}

/// How batchnorm normalizes during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Parameter groups that become trainable leaves in a graph; everything
/// else enters as a detached constant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trainable {
    pub extractor: bool,
    pub source: bool,
    pub target: bool,
    pub aux: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable { extractor: false, source: false, target: false, aux: false };
    pub const EXTRACTOR: Trainable = Trainable { extractor: true, source: false, target: false, aux: false };
    pub const HEADS: Trainable = Trainable { extractor: false, source: true, target: true, aux: true };
    pub const ALL: Trainable = Trainable { extractor: true, source: true, target: true, aux: true };

    fn head(&self, c: Classifier) -> bool {
        match c {
            Classifier::Source => self.source,
            Classifier::Target => self.target,
            Classifier::Aux => self.aux,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Target-domain normalization statistics for one width config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub widths: Vec<usize>,
    pub layers: Vec<BnLayerStats>,
    pub samples: usize,
}

/// A width config viewed through the shared parameter store.
#[derive(Clone, Debug)]
pub struct SlimModel<'a> {
    config: WidthConfig,
    store: &'a ParamStore,
    bn: Option<BnStats>,
}

impl<'a> SlimModel<'a> {
    pub fn slice(store: &'a ParamStore, config: &WidthConfig) -> Result<Self> {
        let arch = store.architecture();
        arch.check_widths(&config.widths)?;
        let config = arch.config(config.widths.clone())?;
        Ok(SlimModel { config, store, bn: None })
    }

    pub fn config(&self) -> &WidthConfig {
        &self.config
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bn(&self) -> Option<&BnStats> {
        self.bn.as_ref()
    }

    pub fn set_bn(&mut self, stats: BnStats) -> Result<()> {
        if stats.widths != self.config.widths {
            return Err(Error::usage(format!(
                "batchnorm statistics for {:?} attached to config {:?}",
                stats.widths, self.config.widths
            )));
        }
        self.bn = Some(stats);
        Ok(())
    }

    fn leaf(&self, g: &mut Graph, id: ParamId, trainable: bool) -> Result<NodeId> {
        let full = self.store.shared(id);
        let full_shape = full.shape().to_vec();
        let node = if trainable { g.param(id, full) } else { g.constant_shared(full) };
        let (rows, cols) = self.store.active_region(id, &self.config);
        match full_shape.as_slice() {
            [r, c] if (*r, *c) == (rows, cols) => Ok(node),
            [n] if *n == cols => Ok(node),
            [_, _] => g.slice(node, 0..rows, 0..cols),
            _ => g.slice_vec(node, cols),
        }
    }

    /// `Linear -> BN -> ReLU` for every layer at the active widths.
    pub fn forward_features(&self, g: &mut Graph, x: NodeId, mode: ForwardMode, trainable: Trainable) -> Result<NodeId> {
        let input_dim = self.store.architecture().input_dim;
        if g.value(x).cols() != input_dim || g.value(x).shape().len() != 2 {
            return Err(Error::config(format!(
                "input has shape {:?}, model expects {input_dim} columns",
                g.value(x).shape()
            )));
        }
        let stats = match mode {
            ForwardMode::Train => None,
            ForwardMode::Eval => Some(self.bn.as_ref().ok_or_else(|| {
                Error::usage("EVAL forward needs batchnorm statistics; run adabn_recalibrate first")
            })?),
        };
        let mut h = x;
        for i in 0..self.store.architecture().layer_count() {
            let p = self.store.layer(i);
            let w = self.leaf(g, p.weight, trainable.extractor)?;
            let b = self.leaf(g, p.bias, trainable.extractor)?;
            let gamma = self.leaf(g, p.gamma, trainable.extractor)?;
            let beta = self.leaf(g, p.beta, trainable.extractor)?;
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            let bn_mode = match stats {
                None => BnMode::Train,
                Some(s) => BnMode::Eval { mean: &s.layers[i].mean, var: &s.layers[i].var },
            };
            let n = g.batchnorm(z, gamma, beta, bn_mode)?;
            h = g.relu(n)?;
        }
        Ok(h)
    }

    pub fn logits(&self, g: &mut Graph, features: NodeId, c: Classifier, trainable: Trainable) -> Result<NodeId> {
        let (w, b) = self.store.head(c);
        let w = self.leaf(g, w, trainable.head(c))?;
        let b = self.leaf(g, b, trainable.head(c))?;
        let z = g.matmul(features, w)?;
        g.add(z, b)
    }

    /// Row-stochastic predictions from one head.
    pub fn classify(&self, g: &mut Graph, features: NodeId, head: Head, trainable: Trainable) -> Result<NodeId> {
        match head {
            Head::S => {
                let z = self.logits(g, features, Classifier::Source, trainable)?;
                g.softmax(z, 1)
            }
            Head::T => {
                let z = self.logits(g, features, Classifier::Target, trainable)?;
                g.softmax(z, 1)
            }
            Head::A => {
                let z = self.logits(g, features, Classifier::Aux, trainable)?;
                g.softmax(z, 1)
            }
            Head::ST => {
                let zs = self.logits(g, features, Classifier::Source, trainable)?;
                let zt = self.logits(g, features, Classifier::Target, trainable)?;
                let z = g.concat(&[zs, zt], 1)?;
                g.softmax(z, 1)
            }
            Head::Task => {
                let ps = self.classify(g, features, Head::S, trainable)?;
                let pt = self.classify(g, features, Head::T, trainable)?;
                let sum = g.add(ps, pt)?;
                g.scale(sum, 0.5)
            }
        }
    }

    /// Detached forward returning head probabilities.
    pub fn predict(&self, x: &Tensor, mode: ForwardMode, head: Head) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let f = self.forward_features(&mut g, xn, mode, Trainable::NONE)?;
        let p = self.classify(&mut g, f, head, Trainable::NONE)?;
        Ok(g.value(p).clone())
    }

    /// Recomputes batchnorm statistics on `target`, attaches them, and
    /// returns the EVAL-mode predictions of `head` on that same data.
    pub fn recalibrate_and_predict(&mut self, target: &Tensor, batch_size: usize, head: Head) -> Result<Tensor> {
        let (stats, features) = collect_stats(self, target, batch_size)?;
        self.bn = Some(stats);
        let mut g = Graph::new();
        let f = g.constant(features);
        let p = self.classify(&mut g, f, head, Trainable::NONE)?;
        Ok(g.value(p).clone())
    }
}

/// AdaBN: exact (not exponentially smoothed) per-layer statistics of the
/// target data under this config, layer by layer.
pub fn adabn_recalibrate(model: &SlimModel<'_>, target: &Tensor, batch_size: usize) -> Result<BnStats> {
    collect_stats(model, target, batch_size).map(|(s, _)| s)
}

fn collect_stats(model: &SlimModel<'_>, target: &Tensor, batch_size: usize) -> Result<(BnStats, Tensor)> {
    let (n, d) = target.require_matrix("adabn target")?;
    if n == 0 {
        return Err(Error::usage("adabn needs target data"));
    }
    if batch_size == 0 {
        return Err(Error::usage("adabn batch size must be positive"));
    }
    let store = model.store;
    let arch = store.architecture();
    if d != arch.input_dim {
        return Err(Error::config(format!("target has {d} columns, model expects {}", arch.input_dim)));
    }
    let mut h = target.data().to_vec();
    let mut width = d;
    let mut layers = Vec::with_capacity(arch.layer_count());
    for (i, shape) in arch.layers(&model.config.widths).iter().enumerate() {
        let p = store.layer(i);
        let w = store.get(p.weight).slice2(0..shape.in_width, 0..shape.out_width)?;
        let out = shape.out_width;
        let mut z = vec![0.0; n * out];
        // chunk rows so peak temporaries stay bounded for large targets
        for start in (0..n).step_by(batch_size) {
            let rows = batch_size.min(n - start);
            gemm(
                rows,
                width,
                out,
                &h[start * width..(start + rows) * width],
                false,
                w.data(),
                false,
                &mut z[start * out..(start + rows) * out],
                false,
            );
        }
        let bias = &store.get(p.bias).data()[..out];
        for row in z.chunks_mut(out) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let (mean, var) = column_moments(&z, n, out);
        if mean.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::numeric("adabn statistics overflowed"));
        }
        let gamma = &store.get(p.gamma).data()[..out];
        let beta = &store.get(p.beta).data()[..out];
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        for row in z.chunks_mut(out) {
            for j in 0..out {
                row[j] = (gamma[j] * ((row[j] - mean[j]) * inv[j]) + beta[j]).max(0.0);
            }
        }
        layers.push(BnLayerStats { mean, var });
        h = z;
        width = out;
    }
    let features = Tensor::matrix(n, width, h)?;
    if !features.is_finite() {
        return Err(Error::numeric("adabn produced non-finite activations"));
    }
    Ok((BnStats { widths: model.config.widths.clone(), layers, samples: n }, features))
}
