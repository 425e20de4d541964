use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_hilt, write_hilt, DType, Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Initial value rule for a new parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, truncated at two std.
    TruncNormal(f64),
    Normal(f64),
}

/// Ordered, named parameter tensors.
///
/// Random initial values are drawn from a stream derived from the store seed
/// and the parameter name alone, so a parameter gets the same value no matter
/// what else was registered before it.
#[derive(Clone)]
pub struct ParamStore<T> {
    seed: u64,
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(contract(format!("parameter {name:?} registered twice")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let mut rng = Rng::derive(self.seed, name);
                Tensor::from_fn(shape, |_| T::of(rng.truncated_normal(std)))
            }
            Init::Normal(std) => {
                let mut rng = Rng::derive(self.seed, name);
                Tensor::from_fn(shape, |_| T::of(rng.normal() * std))
            }
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.values[id.0].clone()
    }

    /// Mutable access; copies the tensor first if a graph still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(contract(format!(
                "parameter {:?} has shape {:?}, not {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    seed: u64,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

const FORMAT: &str = "hilt-checkpoint-v1";

/// Manifest path paired with a checkpoint binary: same stem, `.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes every parameter as a HILT record into `bin`, and a JSON manifest
/// (name, byte offset, shape, dtype, plus caller metadata) next to it.
pub fn save_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    bin: impl AsRef<Path>,
    meta: serde_json::Value,
) -> Result<()> {
    let bin = bin.as_ref();
    let mut buf = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (_, name, value) in store.iter() {
        params.push(ManifestEntry {
            name: name.to_string(),
            offset: buf.len(),
            shape: value.shape().to_vec(),
            dtype: T::DTYPE,
        });
        write_hilt(value, &mut buf)?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        seed: store.seed,
        params,
        meta,
    };
    std::fs::write(bin, buf)?;
    std::fs::write(manifest_path(bin), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Returns the store and
/// the caller metadata.
pub fn load_checkpoint<T: Scalar>(bin: impl AsRef<Path>) -> Result<(ParamStore<T>, serde_json::Value)> {
    let bin = bin.as_ref();
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(manifest_path(bin))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Data(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let bytes = std::fs::read(bin)?;
    let mut store = ParamStore::new(manifest.seed);
    for e in &manifest.params {
        let (t, _) = read_hilt::<T>(&bytes, e.offset)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!(
                "parameter {:?}: manifest shape {:?} but record holds {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        store.add(&e.name, t)?;
    }
    Ok((store, manifest.meta))
}
