use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named trainable tensors with deterministic, seeded initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.vars.len())
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::InvalidConfig(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    /// Registers a tensor drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
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

    /// Snapshot of every tensor whose name starts with `prefix`.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<HashMap<String, Tensor>> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn to_tensors(&self) -> Result<HashMap<String, Tensor>> {
        self.tensors_with_prefix("")
    }

    /// Overwrites stored values in place. Every key must exist with a matching shape.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let unknown: Vec<String> = tensors.keys().filter(|k| !self.vars.contains_key(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::KeyMismatch { missing: Vec::new(), extra: unknown });
        }
        for (name, t) in tensors {
            let var = &self.vars[name];
            if var.dims() != t.dims() {
                return Err(Error::ShapeMismatch { expected: var.dims().to_vec(), actual: t.dims().to_vec() });
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// Loads a full set of tensors, requiring the exact key set under `prefix`.
    pub fn load_exact(&self, prefix: &str, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let mut missing: Vec<String> = self
            .vars
            .keys()
            .filter(|k| k.starts_with(prefix) && !tensors.contains_key(*k))
            .cloned()
            .collect();
        let mut extra: Vec<String> = tensors
            .keys()
            .filter(|k| !k.starts_with(prefix) || !self.vars.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            missing.sort();
            extra.sort();
            return Err(Error::KeyMismatch { missing, extra });
        }
        self.assign(tensors)
    }
}
