use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Classic (non-Nesterov) momentum SGD: `v <- mu*v + g; p <- p - lr*v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    momentum: f64,
    buffers: BTreeMap<ParamId, Tensor>,
}

impl SgdState {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(SgdState { momentum, buffers: BTreeMap::new() })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor> {
        self.buffers.get(&id)
    }
}

/// Storage the optimizer writes through.
pub trait ParamAccess {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor>;
}

impl ParamAccess for Vec<Tensor> {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.get_mut(id.0)
    }
}

/// Applies one momentum step to every parameter in `ids`. Each listed
/// parameter must have a gradient.
pub fn sgd_step(
    ids: &[ParamId],
    params: &mut impl ParamAccess,
    grads: &Gradients,
    state: &mut SgdState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(missing) = ids.iter().find(|id| !grads.contains(**id)) {
        return Err(Error::usage(format!("no gradient for parameter {}", missing.0)));
    }
    for &id in ids {
        let g = grads.get(id).expect("checked above");
        let p = params.param_mut(id).ok_or_else(|| Error::usage(format!("unknown parameter {}", id.0)))?;
        if p.shape() != g.shape() {
            return Err(Error::config(format!(
                "gradient shape {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let v = state.buffers.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
        let mu = state.momentum;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
        if !p.is_finite() {
            return Err(Error::numeric(format!("parameter {} became non-finite", id.0)));
        }
    }
    Ok(())
}

/// Annealed learning rate `l0 / (1 + alpha*p)^beta` over training progress `p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub l0: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { l0: 0.01, alpha: 10.0, beta: 0.75 }
    }
}

impl LrSchedule {
    pub fn at(&self, progress: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::usage(format!("progress {progress} outside [0, 1]")));
        }
        Ok(self.l0 / (1.0 + self.alpha * progress).powf(self.beta))
    }
}
