//! Minimal dense reverse-mode automatic differentiation and the momentum
//! optimizer used to train model banks.

mod graph;
mod optim;
mod tensor;

pub use graph::{BnMode, Gradients, Graph, NodeId, ParamId, BN_EPS};
pub(crate) use graph::column_moments;
pub use optim::{sgd_step, LrSchedule, ParamAccess, SgdState};
pub use tensor::{matmul, Tensor};
pub(crate) use tensor::gemm;
