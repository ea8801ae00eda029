use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    Const(f64),
    /// Depthwise kernel `[taps, channels]`: small noise plus 1 at `tap`.
    DepthwiseIdentity {
        tap: usize,
        std: f64,
    },
    Uniform(f64),
}

#[derive(Debug)]
struct Entry {
    var: Var,
    trainable: bool,
}

#[derive(Debug)]
struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter storage shared by the modules of one component.
///
/// Initialization draws from a ChaCha stream, so two stores created with the
/// same seed and the same construction order hold identical values.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn scope(&self, prefix: &str) -> Scope {
        self.root().pp(prefix)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("param store poisoned")
    }

    /// Trainable variables in name order, optionally restricted to a prefix.
    pub fn trainable_vars(&self, prefix: Option<&str>) -> Vec<Var> {
        self.lock()
            .entries
            .iter()
            .filter(|(k, e)| e.trainable && prefix.is_none_or(|p| k.starts_with(p)))
            .map(|(_, e)| e.var.clone())
            .collect()
    }

    pub fn named_trainable(&self) -> Vec<(String, Var)> {
        self.lock()
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Count of trainable scalars under `prefix` (all when `None`).
    pub fn num_params(&self, prefix: Option<&str>) -> usize {
        self.lock()
            .entries
            .iter()
            .filter(|(k, e)| e.trainable && prefix.is_none_or(|p| k.starts_with(p)))
            .map(|(_, e)| e.var.elem_count())
            .sum()
    }

    /// Every stored tensor (parameters and buffers) in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor, bool)> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| (k.clone(), e.var.as_tensor().clone(), e.trainable))
            .collect()
    }

    /// Overwrites stored values by name; every stored entry must be present.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let inner = self.lock();
        for (name, entry) in &inner.entries {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != entry.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    entry.var.dims()
                )));
            }
            entry.var.set(&src.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().find(|k| !inner.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Deep copy of all values, detached from the live variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().copy()?)))
            .collect()
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if inner.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut inner.rng);
                    z * std
                })
                .collect(),
            Init::Const(c) => vec![c; n],
            Init::Uniform(a) => (0..n).map(|_| inner.rng.random_range(-a..a)).collect(),
            Init::DepthwiseIdentity { tap, std } => {
                let dims = shape.dims();
                let channels = dims[dims.len() - 1];
                (0..n)
                    .map(|i| {
                        let z: f64 = StandardNormal.sample(&mut inner.rng);
                        let base = if i / channels == tap { 1.0 } else { 0.0 };
                        base + z.clamp(-2.0, 2.0) * std
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        drop(inner);
        Ok(self.insert(name, t, trainable)?.1)
    }

    fn insert_var(&self, name: String, t: Tensor, trainable: bool) -> Result<(Tensor, Var)> {
        let mut inner = self.lock();
        if inner.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        inner.entries.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok((var.as_tensor().clone(), var))
    }

    fn insert(&self, name: String, t: Tensor, trainable: bool) -> Result<(Tensor, Var)> {
        self.insert_var(name, t, trainable)
    }
}

/// A name prefix within a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        Ok(self
            .store
            .create(self.path(name), shape.into(), init, true)?
            .as_tensor()
            .clone())
    }

    /// Registers a trainable parameter with explicit initial values.
    pub fn param_from(&self, name: &str, values: Tensor) -> Result<Tensor> {
        Ok(self.store.insert(self.path(name), values, true)?.0)
    }

    /// Non-trainable state saved with the checkpoint (e.g. running statistics).
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store
            .create(self.path(name), shape.into(), init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let make = || {
            let s = ParamStore::new(DType::F32, 7);
            s.root()
                .pp("a")
                .param("w", (3, 4), Init::TruncNormal(0.02))
                .unwrap();
            s.root().param("b", 5, Init::Normal(1.0)).unwrap();
            s.snapshot().unwrap()
        };
        let (x, y) = (make(), make());
        for (k, t) in &x {
            let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = y[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn counts_only_trainable() {
        let s = ParamStore::new(DType::F32, 0);
        s.root().param("w", (10, 5), Init::Const(0.0)).unwrap();
        s.root().param("b", 5, Init::Const(0.0)).unwrap();
        s.root().buffer("running", 5, Init::Const(0.0)).unwrap();
        assert_eq!(s.num_params(None), 55);
        assert_eq!(s.trainable_vars(None).len(), 2);
        assert_eq!(s.named_tensors().len(), 3);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(DType::F32, 0);
        s.root().param("w", 2, Init::Const(0.0)).unwrap();
        assert!(s.root().param("w", 2, Init::Const(0.0)).is_err());
    }

    #[test]
    fn truncated_normal_is_bounded() {
        let s = ParamStore::new(DType::F64, 3);
        let t = s
            .root()
            .param("w", 10_000, Init::TruncNormal(0.02))
            .unwrap();
        let v: Vec<f64> = t.to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-12));
    }
}
