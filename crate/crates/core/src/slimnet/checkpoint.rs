use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::arch::Architecture;
use super::store::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// On-disk form of a trained (or freshly initialized) bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub store: ParamStore,
    pub seed: u64,
    pub step: u64,
    pub mode: String,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    architecture: &'a Architecture,
    mode: &'a str,
    seed: u64,
    step: u64,
    params: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
struct CheckpointIn {
    architecture: Architecture,
    #[serde(default)]
    mode: String,
    seed: u64,
    step: u64,
    params: Vec<Array>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Array {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

// 17 significant digits: enough to round-trip any f64 exactly.
fn push_number(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

fn encode(t: &Tensor) -> Result<Box<RawValue>> {
    let mut s = String::with_capacity(t.len() * 24);
    let row = |s: &mut String, xs: &[f64]| {
        s.push('[');
        for (i, &v) in xs.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            push_number(s, v);
        }
        s.push(']');
    };
    match t.shape() {
        [_] => row(&mut s, t.data()),
        [r, _] => {
            s.push('[');
            for i in 0..*r {
                if i > 0 {
                    s.push(',');
                }
                row(&mut s, t.row(i));
            }
            s.push(']');
        }
        other => return Err(Error::usage(format!("cannot checkpoint a tensor of rank {}", other.len()))),
    }
    RawValue::from_string(s).map_err(Error::from)
}

fn decode(a: Array) -> Result<Tensor> {
    match a {
        Array::Vector(v) => Ok(Tensor::vector(v)),
        Array::Matrix(rows) => Tensor::from_rows(&rows).map_err(|e| Error::Load(e.to_string())),
    }
}

impl Checkpoint {
    pub fn new(store: ParamStore, seed: u64, step: u64, mode: impl Into<String>) -> Self {
        Checkpoint { architecture: store.architecture().clone(), store, seed, step, mode: mode.into() }
    }

    pub fn to_json(&self) -> Result<String> {
        let params = self.store.tensors().map(encode).collect::<Result<Vec<_>>>()?;
        let out = CheckpointOut { architecture: &self.architecture, mode: &self.mode, seed: self.seed, step: self.step, params };
        Ok(serde_json::to_string(&out)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CheckpointIn = serde_json::from_str(text).map_err(|e| Error::Load(e.to_string()))?;
        let tensors = raw.params.into_iter().map(decode).collect::<Result<Vec<_>>>()?;
        let store = ParamStore::from_tensors(&raw.architecture, tensors)?;
        Ok(Checkpoint { architecture: raw.architecture, store, seed: raw.seed, step: raw.step, mode: raw.mode })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Loads and checks that the stored architecture is the expected one.
    pub fn load_expecting(path: &Path, arch: &Architecture) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.architecture != arch {
            return Err(Error::Load(format!(
                "checkpoint architecture {:?} does not match configured {:?}",
                ck.architecture, arch
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture::new(3, vec![5, 7], 2, 3).unwrap();
        let store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let ck = Checkpoint::new(store, 9, 123, "slimda");
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.store.tensors().zip(ck.store.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn architecture_mismatch_is_load_error() {
        let arch = Architecture::new(3, vec![5], 1, 2).unwrap();
        let store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::new(store, 1, 0, "baseline").save(&path).unwrap();
        let other = Architecture::new(3, vec![6], 1, 2).unwrap();
        assert!(matches!(Checkpoint::load_expecting(&path, &other), Err(Error::Load(_))));
        assert!(Checkpoint::load_expecting(&path, &arch).is_ok());
    }

    #[test]
    fn tampered_shapes_rejected() {
        let arch = Architecture::new(2, vec![3], 1, 2).unwrap();
        let store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let text = Checkpoint::new(store, 1, 0, "slimda").to_json().unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["architecture"]["block_max_widths"] = serde_json::json!([4]);
        assert!(matches!(Checkpoint::from_json(&v.to_string()), Err(Error::Load(_))));
    }
}
