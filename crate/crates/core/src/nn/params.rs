//! Named, seeded trainable parameters.
//!
//! Initial values come from a ChaCha stream seeded at construction, drawn
//! in creation order, so two models built from the same seed and config are
//! bit-identical.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    /// He normal: `N(0, 2 / fan_in)`.
    Kaiming { fan_in: usize },
    Normal { std: f64 },
    /// `U(-bound, bound)`.
    Uniform { bound: f64 },
}

struct Inner {
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

/// Owns every parameter of a model. Cloning shares the same store.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                vars: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamBuilder {
        ParamBuilder {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn len(&self) -> usize {
        self.lock().vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in creation order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.lock().vars.clone()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.lock().vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock()
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.lock().vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Scalar parameter count of the entries whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.lock()
            .vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&self, prefix: &str) {
        self.lock().vars.retain(|(n, _)| !n.starts_with(prefix));
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.lock();
        if inner.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                sample(&mut inner.rng, n, Normal::new(0.0, std).expect("finite std"))
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Config(format!("normal init std {std}: {e}")))?;
                sample(&mut inner.rng, n, dist)
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Config(format!("uniform init bound {bound}: {e}")))?;
                sample(&mut inner.rng, n, dist)
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.push((name, var));
        Ok(out)
    }

    /// Writes all parameters to a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors file. The file must hold
    /// exactly this store's names and shapes.
    pub fn load(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
            ));
        }
        let mut tensors = candle_core::safetensors::load(path, &self.device)?;
        let vars = self.named_vars();
        if tensors.len() != vars.len() {
            return Err(Error::Consistency(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                vars.len()
            )));
        }
        for (name, var) in &vars {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Consistency(format!("checkpoint lacks parameter {name:?}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Consistency(format!(
                    "parameter {name:?} has shape {:?} in the checkpoint, {:?} in the model",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Copies values from another store with identical names and shapes.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        let src = other.named_vars();
        let dst = self.named_vars();
        if src.len() != dst.len() {
            return Err(Error::Consistency("parameter stores differ in size".into()));
        }
        for ((ns, vs), (nd, vd)) in src.iter().zip(&dst) {
            if ns != nd || vs.dims() != vd.dims() {
                return Err(Error::Consistency(format!(
                    "parameter {ns:?} does not match {nd:?}"
                )));
            }
            vd.set(&vs.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

fn sample<D: Distribution<f64>>(rng: &mut ChaCha8Rng, n: usize, dist: D) -> Vec<f64> {
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// A store handle with a dotted name prefix.
#[derive(Clone, Debug)]
pub struct ParamBuilder {
    store: ParamStore,
    prefix: String,
}

impl ParamBuilder {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamBuilder {
        ParamBuilder {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.path(name), shape, init)
    }
}
