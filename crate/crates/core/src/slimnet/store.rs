use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::arch::{Architecture, WidthConfig};
use crate::autodiff::{ParamAccess, ParamId, Tensor};
use crate::error::{Error, Result};

/// The three classifier heads sharing one feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Classifier {
    /// `C^s`, domain-confusion head.
    Source,
    /// `C^t`, domain-confusion head.
    Target,
    /// `C^a`, distillation head and the one kept for deployment.
    Aux,
}

impl Classifier {
    pub const ALL: [Classifier; 3] = [Classifier::Source, Classifier::Target, Classifier::Aux];

    fn index(self) -> usize {
        match self {
            Classifier::Source => 0,
            Classifier::Target => 1,
            Classifier::Aux => 2,
        }
    }
}

/// Which part of the bank a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Head(Classifier),
}

/// Per-layer parameter ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Full-width parameter bank. Every sub-model reads a leading-channel
/// slice of these tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    arch: Architecture,
    tensors: Vec<Arc<Tensor>>,
}

const PER_LAYER: usize = 4;

impl ParamStore {
    /// He-normal weights (full-width fan-in), zero biases, unit gamma,
    /// zero beta; heads get `N(0, 1/features)` weights.
    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        for layer in arch.layers(&arch.block_max_widths) {
            let std = (2.0 / layer.in_width as f64).sqrt();
            tensors.push(random_matrix(layer.in_width, layer.out_width, std, rng));
            tensors.push(Tensor::zeros(&[layer.out_width]));
            tensors.push(Tensor::full(&[layer.out_width], 1.0));
            tensors.push(Tensor::zeros(&[layer.out_width]));
        }
        let feat = arch.feature_max();
        for _ in Classifier::ALL {
            tensors.push(random_matrix(feat, arch.class_count, (1.0 / feat as f64).sqrt(), rng));
            tensors.push(Tensor::zeros(&[arch.class_count]));
        }
        Ok(ParamStore { arch: arch.clone(), tensors: tensors.into_iter().map(Arc::new).collect() })
    }

    /// Rebuilds a store from raw tensors, checking every shape.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = Self::expected_shapes(arch);
        if tensors.len() != expected.len() {
            return Err(Error::Load(format!("expected {} parameter arrays, found {}", expected.len(), tensors.len())));
        }
        for (i, (t, shape)) in tensors.iter().zip(&expected).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter {i} ({}) has shape {:?}, architecture needs {shape:?}",
                    Self::name_of(arch, ParamId(i)),
                    t.shape()
                )));
            }
        }
        Ok(ParamStore { arch: arch.clone(), tensors: tensors.into_iter().map(Arc::new).collect() })
    }

    fn expected_shapes(arch: &Architecture) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in arch.layers(&arch.block_max_widths) {
            shapes.push(vec![l.in_width, l.out_width]);
            shapes.extend(std::iter::repeat_n(vec![l.out_width], 3));
        }
        for _ in Classifier::ALL {
            shapes.push(vec![arch.feature_max(), arch.class_count]);
            shapes.push(vec![arch.class_count]);
        }
        shapes
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn layer(&self, index: usize) -> LayerParams {
        let base = index * PER_LAYER;
        LayerParams { weight: ParamId(base), bias: ParamId(base + 1), gamma: ParamId(base + 2), beta: ParamId(base + 3) }
    }

    /// `(weight, bias)` of a classifier head.
    pub fn head(&self, c: Classifier) -> (ParamId, ParamId) {
        let base = self.arch.layer_count() * PER_LAYER + 2 * c.index();
        (ParamId(base), ParamId(base + 1))
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        let head_base = self.arch.layer_count() * PER_LAYER;
        if id.0 < head_base {
            ParamGroup::Extractor
        } else {
            ParamGroup::Head(Classifier::ALL[(id.0 - head_base) / 2])
        }
    }

    pub fn extractor_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.group(*id) == ParamGroup::Extractor).collect()
    }

    pub fn head_ids(&self, c: Classifier) -> Vec<ParamId> {
        let (w, b) = self.head(c);
        vec![w, b]
    }

    pub fn name(&self, id: ParamId) -> String {
        Self::name_of(&self.arch, id)
    }

    fn name_of(arch: &Architecture, id: ParamId) -> String {
        let head_base = arch.layer_count() * PER_LAYER;
        if id.0 < head_base {
            let layer = id.0 / PER_LAYER;
            let part = ["weight", "bias", "gamma", "beta"][id.0 % PER_LAYER];
            format!("layer{layer}.{part}")
        } else {
            let head = ["source", "target", "aux"][(id.0 - head_base) / 2];
            let part = ["weight", "bias"][(id.0 - head_base) % 2];
            format!("head.{head}.{part}")
        }
    }

    /// The `(rows, cols)` leading region of a parameter that a config reads.
    /// Vectors report `rows == 1`.
    pub fn active_region(&self, id: ParamId, config: &WidthConfig) -> (usize, usize) {
        let layers = self.arch.layers(&config.widths);
        match self.group(id) {
            ParamGroup::Extractor => {
                let l = layers[id.0 / PER_LAYER];
                if id.0 % PER_LAYER == 0 {
                    (l.in_width, l.out_width)
                } else {
                    (1, l.out_width)
                }
            }
            ParamGroup::Head(c) => {
                if id == self.head(c).0 {
                    (config.feature_width(), self.arch.class_count)
                } else {
                    (1, self.arch.class_count)
                }
            }
        }
    }

    /// Copies the slice for `config` into a new store whose full width is
    /// exactly `config`.
    pub fn extract_standalone(&self, config: &WidthConfig) -> Result<ParamStore> {
        self.arch.check_widths(&config.widths)?;
        let sub_arch = Architecture { block_max_widths: config.widths.clone(), ..self.arch.clone() };
        let mut tensors = Vec::with_capacity(self.len());
        for id in self.ids() {
            let t = self.get(id);
            let (rows, cols) = self.active_region(id, config);
            tensors.push(if t.shape().len() == 2 { t.slice2(0..rows, 0..cols)? } else { t.head(cols)? });
        }
        ParamStore::from_tensors(&sub_arch, tensors)
    }
}

impl ParamAccess for ParamStore {
    fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.tensors.get_mut(id.0).map(Arc::make_mut)
    }
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}
