//! Two-domain synthetic classification tasks with a controllable shift
//! between the labeled source and the unlabeled target.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::symnet::DomainBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    /// Rotate every coordinate pair `(0,1), (2,3), ...` by `magnitude` radians.
    Rotation,
    /// Translate by `magnitude` along the all-ones direction.
    Translation,
    /// Scale by `1 + magnitude`.
    Scaling,
    /// Rotation by `magnitude`, scaling by `1 + magnitude/2`, translation by `magnitude`.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub magnitude: f64,
    /// Within-cluster standard deviation, shared by both domains.
    pub noise_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFamily {
    /// Two-moons for two classes, Gaussian mixtures otherwise.
    Auto,
    Clusters,
    Moons,
}

/// Everything that determines a generated dataset besides the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub shift: ShiftSpec,
    pub classes: usize,
    pub dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Gaussian modes per class; more modes need more capacity to separate.
    #[serde(default = "default_modes")]
    pub modes_per_class: usize,
    /// Standard deviation of the mode centers around the origin.
    #[serde(default = "default_spread")]
    pub center_spread: f64,
    #[serde(default = "default_family")]
    pub family: ClassFamily,
}

fn default_modes() -> usize {
    8
}

fn default_spread() -> f64 {
    1.0
}

fn default_family() -> ClassFamily {
    ClassFamily::Auto
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            shift: ShiftSpec { kind: ShiftKind::Mixed, magnitude: 0.5, noise_std: 0.9 },
            classes: 4,
            dim: 16,
            n_source: 2000,
            n_target: 2000,
            modes_per_class: default_modes(),
            center_spread: default_spread(),
            family: ClassFamily::Auto,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if self.n_source < self.classes || self.n_target < self.classes {
            return Err(Error::config("each domain needs at least one sample per class"));
        }
        if self.modes_per_class == 0 {
            return Err(Error::config("modes_per_class must be at least 1"));
        }
        if self.family == ClassFamily::Moons && self.classes != 2 {
            return Err(Error::config("two-moons needs exactly 2 classes"));
        }
        for (name, v) in [("magnitude", self.shift.magnitude), ("center_spread", self.center_spread)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be a non-negative number")));
            }
        }
        if !self.shift.noise_std.is_finite() || self.shift.noise_std < 0.0 {
            return Err(Error::config("noise_std must be a non-negative number"));
        }
        Ok(())
    }

    fn family(&self) -> ClassFamily {
        match self.family {
            ClassFamily::Auto if self.classes == 2 => ClassFamily::Moons,
            ClassFamily::Auto => ClassFamily::Clusters,
            f => f,
        }
    }
}

/// Labeled source, unlabeled target, and target labels that only
/// evaluation code can read.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub spec: GeneratorSpec,
    pub seed: u64,
    xs: Tensor,
    ys: Vec<usize>,
    xt: Tensor,
    yt_hidden: Option<Vec<usize>>,
    labels_unlocked: bool,
}

#[derive(Serialize)]
struct DatasetOut<'a> {
    spec: &'a GeneratorSpec,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    xs: Vec<&'a [f64]>,
    ys: &'a [usize],
    xt: Vec<&'a [f64]>,
    yt_hidden: Option<&'a [usize]>,
}

// The training loader has no `yt_hidden` field; serde skips that section
// without materializing it.
#[derive(Deserialize)]
struct TrainingView {
    spec: GeneratorSpec,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    xt: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct EvaluationView {
    yt_hidden: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn source(&self) -> (&Tensor, &[usize]) {
        (&self.xs, &self.ys)
    }

    pub fn target(&self) -> &Tensor {
        &self.xt
    }

    pub fn has_target_labels(&self) -> bool {
        self.yt_hidden.is_some()
    }

    /// Lifts the leakage guard. Only evaluation commands call this.
    pub fn unlock_evaluation(&mut self) {
        self.labels_unlocked = true;
    }

    pub fn evaluation_unlocked(&self) -> bool {
        self.labels_unlocked
    }

    pub fn target_labels(&self) -> Result<&[usize]> {
        if !self.labels_unlocked {
            return Err(Error::LabelLeak);
        }
        self.yt_hidden.as_deref().ok_or_else(|| Error::usage("dataset carries no target labels"))
    }

    pub fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        let out = DatasetOut {
            spec: &self.spec,
            seed: self.seed,
            k: self.classes(),
            d: self.dim(),
            xs: (0..self.xs.rows()).map(|r| self.xs.row(r)).collect(),
            ys: &self.ys,
            xt: (0..self.xt.rows()).map(|r| self.xt.row(r)).collect(),
            yt_hidden: self.yt_hidden.as_deref(),
        };
        Ok(serde_json::to_string(&out)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Parses everything except the hidden target labels.
    pub fn from_json_for_training(text: &str) -> Result<Self> {
        let v: TrainingView = serde_json::from_str(text)?;
        v.spec.validate()?;
        if v.k != v.spec.classes || v.d != v.spec.dim {
            return Err(Error::config("dataset header disagrees with its generator spec"));
        }
        let xs = Tensor::from_rows(&v.xs)?;
        let xt = Tensor::from_rows(&v.xt)?;
        if xs.cols() != v.d || xt.cols() != v.d || v.ys.len() != xs.rows() {
            return Err(Error::config("dataset arrays have inconsistent shapes"));
        }
        if v.ys.iter().any(|&y| y >= v.k) {
            return Err(Error::config("source label outside [0, K)"));
        }
        Ok(DomainDataset { spec: v.spec, seed: v.seed, xs, ys: v.ys, xt, yt_hidden: None, labels_unlocked: false })
    }

    /// Full parse with target labels available.
    pub fn from_json_for_evaluation(text: &str) -> Result<Self> {
        let mut ds = Self::from_json_for_training(text)?;
        let v: EvaluationView = serde_json::from_str(text)?;
        if let Some(yt) = &v.yt_hidden {
            if yt.len() != ds.xt.rows() || yt.iter().any(|&y| y >= ds.classes()) {
                return Err(Error::config("yt_hidden does not match the target set"));
            }
        }
        ds.yt_hidden = v.yt_hidden;
        ds.labels_unlocked = true;
        Ok(ds)
    }

    pub fn load_for_training(path: &Path) -> Result<Self> {
        Self::from_json_for_training(&fs::read_to_string(path)?)
    }

    pub fn load_for_evaluation(path: &Path) -> Result<Self> {
        Self::from_json_for_evaluation(&fs::read_to_string(path)?)
    }
}

/// Generates both domains from one seed. The target is drawn from the same
/// class-conditional distributions as the source and then transformed.
pub fn make_dataset(spec: &GeneratorSpec, seed: u64) -> Result<DomainDataset> {
    spec.validate()?;
    let mut rng = stream(seed, Stream::Generator);
    let sampler = Sampler::new(spec, &mut rng);
    let (xs, ys) = sampler.draw(spec.n_source, &mut rng)?;
    let (raw_t, yt) = sampler.draw(spec.n_target, &mut rng)?;
    let xt = apply_shift(&raw_t, &spec.shift);
    if !xs.is_finite() || !xt.is_finite() {
        return Err(Error::config("generator parameters produced non-finite samples"));
    }
    Ok(DomainDataset { spec: spec.clone(), seed, xs, ys, xt, yt_hidden: Some(yt), labels_unlocked: false })
}

struct Sampler {
    family: ClassFamily,
    classes: usize,
    dim: usize,
    noise: f64,
    /// `centers[class][mode]`
    centers: Vec<Vec<Vec<f64>>>,
}

impl Sampler {
    fn new(spec: &GeneratorSpec, rng: &mut impl Rng) -> Self {
        let family = spec.family();
        let spread = Normal::new(0.0, spec.center_spread).expect("validated spread");
        let centers = match family {
            ClassFamily::Clusters => (0..spec.classes)
                .map(|_| (0..spec.modes_per_class).map(|_| (0..spec.dim).map(|_| spread.sample(rng)).collect()).collect())
                .collect(),
            _ => Vec::new(),
        };
        Sampler { family, classes: spec.classes, dim: spec.dim, noise: spec.shift.noise_std, centers }
    }

    fn draw(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        // exact balance: labels round-robin, then shuffled
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(rng);
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::config(e.to_string()))?;
        let mut data = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            match self.family {
                ClassFamily::Moons => {
                    let t = rng.random_range(0.0..PI);
                    // centered at the midpoint of the two arcs, so a half
                    // turn maps one moon onto the other
                    let (x0, x1) = if y == 0 { (t.cos() - 0.5, t.sin() - 0.25) } else { (0.5 - t.cos(), 0.25 - t.sin()) };
                    data.push(x0 + noise.sample(rng));
                    data.push(x1 + noise.sample(rng));
                    data.extend((2..self.dim).map(|_| noise.sample(rng)));
                }
                _ => {
                    let modes = &self.centers[y];
                    let c = &modes[rng.random_range(0..modes.len())];
                    data.extend(c.iter().map(|m| m + noise.sample(rng)));
                }
            }
        }
        Ok((Tensor::matrix(n, self.dim, data)?, labels))
    }
}

/// Applies a [`ShiftSpec`] transform to every row.
pub fn apply_shift(x: &Tensor, shift: &ShiftSpec) -> Tensor {
    let d = x.cols();
    let m = shift.magnitude;
    let (angle, scale, offset) = match shift.kind {
        ShiftKind::Rotation => (m, 1.0, 0.0),
        ShiftKind::Translation => (0.0, 1.0, m),
        ShiftKind::Scaling => (0.0, 1.0 + m, 0.0),
        ShiftKind::Mixed => (m, 1.0 + m / 2.0, m),
    };
    let (sin, cos) = angle.sin_cos();
    let step = offset / (d as f64).sqrt();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        for pair in row.chunks_exact_mut(2) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = cos * a - sin * b;
            pair[1] = sin * a + cos * b;
        }
        row.iter_mut().for_each(|v| *v = *v * scale + step);
    }
    out
}

/// Source/target index pairs for one epoch: `ceil(max(n_s, n_t) / b)`
/// batches, each domain drawn from back-to-back fresh permutations so every
/// batch is full and every sample appears at least once.
pub fn epoch_indices(n_source: usize, n_target: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if batch_size < 2 {
        return Err(Error::usage("batch size must be at least 2"));
    }
    if batch_size > n_source || batch_size > n_target {
        return Err(Error::usage(format!(
            "batch size {batch_size} exceeds a domain size ({n_source} source, {n_target} target)"
        )));
    }
    let count = n_source.max(n_target).div_ceil(batch_size);
    let order = |n: usize, rng: &mut dyn rand::RngCore| {
        let mut all = Vec::with_capacity(count * batch_size + n);
        while all.len() < count * batch_size {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            all.extend(p);
        }
        all
    };
    let s = order(n_source, rng);
    let t = order(n_target, rng);
    Ok((0..count)
        .map(|i| {
            let r = i * batch_size..(i + 1) * batch_size;
            (s[r.clone()].to_vec(), t[r].to_vec())
        })
        .collect())
}

/// Materialized batches for one epoch. Target labels are never touched.
pub fn batches(dataset: &DomainDataset, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<DomainBatch>> {
    let (xs, ys) = dataset.source();
    let xt = dataset.target();
    epoch_indices(xs.rows(), xt.rows(), batch_size, rng)?
        .into_iter()
        .map(|(si, ti)| DomainBatch::new(xs.select_rows(&si)?, si.iter().map(|&i| ys[i]).collect(), xt.select_rows(&ti)?))
        .collect()
}
