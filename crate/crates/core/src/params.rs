//! Named parameter storage shared by blocks, the trainer and serialization.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`, the usual default for convolution layers.
    KaimingUniform {
        fan_in: usize,
    },
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn trainable(path: String, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec { path, shape, init, kind: ParamKind::Trainable }
    }

    pub fn buffer(path: String, shape: Vec<usize>, value: f64) -> Self {
        ParamSpec { path, shape, init: Init::Const(value), kind: ParamKind::Buffer }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Tensor dims for a logical shape of rank ≤ 4, padded with trailing ones.
pub fn shape_dims(shape: &[usize]) -> Result<Dims> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!("parameter rank {} not in 1..=4", shape.len())));
    }
    let mut a = [1usize; 4];
    a[..shape.len()].copy_from_slice(shape);
    Ok(Dims::from_array(a))
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub value: Arc<Tensor<T>>,
}

/// Parameters keyed by hierarchical path, iterated in path order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every spec. Paths must be unique.
    pub fn from_specs<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in specs {
            let dims = shape_dims(&spec.shape)?;
            let data: Vec<T> = match spec.init {
                Init::Const(v) => vec![T::of(v); dims.len()],
                Init::KaimingUniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..dims.len()).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                }
            };
            store.insert(spec.path.clone(), spec.shape.clone(), spec.kind, Tensor::new(dims, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, path: String, shape: Vec<usize>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        if value.dims() != shape_dims(&shape)? {
            return Err(Error::shape(format!("`{path}`: shape {shape:?} vs tensor {}", value.dims())));
        }
        if self.entries.contains_key(&path) {
            return Err(Error::config(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, Param { shape, kind, value: Arc::new(value) });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Param<T>> {
        self.entries.get(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Arc<Tensor<T>>> {
        self.entries.get(path).map(|p| &p.value).ok_or_else(|| Error::config(format!("missing parameter `{path}`")))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(path)
            .map(|p| Arc::make_mut(&mut p.value))
            .ok_or_else(|| Error::config(format!("missing parameter `{path}`")))
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, path: &str, value: Tensor<T>) -> Result<()> {
        let entry = self.entries.get_mut(path).ok_or_else(|| Error::UnknownPath(path.to_string()))?;
        if value.dims() != entry.value.dims() {
            return Err(Error::shape(format!("`{path}`: {} vs registered {}", value.dims(), entry.value.dims())));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|p| p.kind == ParamKind::Trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (k.clone(), Param { shape: p.shape.clone(), kind: p.kind, value: Arc::new(p.value.cast()) })
                })
                .collect(),
        }
    }
}
