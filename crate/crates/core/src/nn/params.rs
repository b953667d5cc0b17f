use std::collections::BTreeMap;

use candle_core::{DType, Device, Shape, Tensor, Var};

use crate::rng::{self, SeededRng};
use crate::{Error, Result};

/// Named trainable variables plus non-trainable buffers (batch-norm running
/// statistics). Layers hold clones of the same `Var`s, so updates made by an
/// optimizer through the store are visible to the layers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    vars: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, vars: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<S: Into<Shape>>(
        &mut self,
        name: &str,
        shape: S,
        bound: f64,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let t = rng::uniform_tensor(rng, shape, -bound, bound, self.dtype)?;
        self.insert(name, t)
    }

    pub fn zeros<S: Into<Shape>>(&mut self, name: &str, shape: S) -> Result<Var> {
        let t = Tensor::zeros(shape, self.dtype, &Device::Cpu)?;
        self.insert(name, t)
    }

    pub fn ones<S: Into<Shape>>(&mut self, name: &str, shape: S) -> Result<Var> {
        let t = Tensor::ones(shape, self.dtype, &Device::Cpu)?;
        self.insert(name, t)
    }

    pub fn from_tensor(&mut self, name: &str, t: Tensor) -> Result<Var> {
        self.insert(name, t)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate buffer `{name}`")));
        }
        let v = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.buffers.insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn trainable_named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Every stored tensor (trainable and buffers), detached.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrites every stored tensor from `src`; names and shapes must match.
    pub fn load(&self, src: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.vars.len() + self.buffers.len();
        if src.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {expected}, found {}",
                src.len()
            )));
        }
        for (name, var) in self.vars.iter().chain(self.buffers.iter()) {
            let t = src
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies all values from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        self.load(&other.tensors())
    }
}
