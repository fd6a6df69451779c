//! Width-slimmable MLP bank: every sub-network reads the leading channels
//! of one shared set of full-width parameters.

mod arch;
mod checkpoint;
mod model;
mod store;

pub use arch::{Architecture, LayerShape, WidthConfig};
pub use checkpoint::Checkpoint;
pub use model::{adabn_recalibrate, BnLayerStats, BnStats, ForwardMode, Head, SlimModel, Trainable};
pub use store::{Classifier, LayerParams, ParamGroup, ParamStore};
