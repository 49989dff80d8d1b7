//! Minimal neural-network plumbing on top of candle tensors: a seeded
//! parameter store, a path-scoped builder, and the handful of layers the
//! codec, feature net, and U-Net are assembled from.

mod conv;
mod layers;

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::sr::lora::{LoraAdapter, LoraSet};
use crate::{Error, Result};

pub use conv::{conv2d, conv2d_bias, upsample_nearest2x, ConvGeometry};
pub use layers::{
    attention, group_norm, layer_norm, log_softmax_last, softmax_last, Conv2d, CrossAttention, FeedForward, GroupNorm,
    LayerNorm, Linear,
};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
}

/// Named parameters keyed by dotted path. Tensors created here are drawn from
/// a seeded ChaCha stream in creation order, so two stores built by the same
/// code path with the same seed are bit-identical.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
    trainable: bool,
    growable: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, trainable: bool) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: Device::Cpu,
            trainable,
            growable: true,
        }
    }

    /// Wraps already-materialized tensors. Missing parameters requested later
    /// are an error rather than silently initialized.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, dtype: DType, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            vars: RefCell::new(vars),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            dtype,
            device: Device::Cpu,
            trainable,
            growable: false,
        })
    }

    pub fn root(&self) -> Vb<'_> {
        Vb { store: self, prefix: String::new(), adapters: None }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn len(&self) -> usize {
        self.vars.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.borrow().is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.borrow().contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.vars.borrow().get(name).map(|v| v.as_tensor().clone())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Variables sorted by name, the order optimizers see them in.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.borrow().values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn insert(&self, name: &str, t: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(())
    }

    /// Overwrites an existing variable in place, keeping its identity.
    pub fn assign(&self, name: &str, t: &Tensor) -> Result<()> {
        let vars = self.vars.borrow();
        let var = vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter `{name}`")))?;
        var.set(&t.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes, and little-endian f32 payloads.
    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(&self.named_tensors())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        z * std
                    })
                    .collect(),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.borrow_mut().insert(name, var.clone());
        Ok(var)
    }
}

pub fn checksum_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// `target ← m·target + (1−m)·source` for every parameter of `target`,
/// elementwise in `f32`.
pub fn ema_update(target: &ParamStore, source: &ParamStore, momentum: f64) -> Result<()> {
    let m = momentum as f32;
    for name in target.names() {
        let t = target.get(&name).expect("listed name");
        let s = source
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("source lacks `{name}`")))?;
        let tv: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let sv: Vec<f32> = s.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let out: Vec<f32> = tv.iter().zip(&sv).map(|(t, s)| m * t + (1.0 - m) * s).collect();
        target.assign(&name, &Tensor::from_vec(out, t.dims(), t.device())?)?;
    }
    Ok(())
}

/// Path-scoped view of a [`ParamStore`], optionally carrying the adapter set
/// that layers consult when they are constructed.
#[derive(Clone)]
pub struct Vb<'a> {
    store: &'a ParamStore,
    prefix: String,
    adapters: Option<&'a LoraSet>,
}

impl<'a> Vb<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Vb<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Vb { store: self.store, prefix, adapters: self.adapters }
    }

    pub fn with_adapters(&self, adapters: Option<&'a LoraSet>) -> Vb<'a> {
        Vb { store: self.store, prefix: self.prefix.clone(), adapters }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Fetches `prefix.name`, creating it with `init` if the store does not
    /// hold it yet. Frozen stores hand out detached tensors so no gradient is
    /// tracked through them.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let path = self.path(name);
        let existing = self.store.vars.borrow().get(&path).cloned();
        let var = match existing {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::Shape(format!(
                        "parameter `{path}` has shape {:?}, expected {shape:?}",
                        v.dims()
                    )));
                }
                v
            }
            None if self.store.growable => self.store.create(path, shape, init)?,
            None => return Err(Error::Checkpoint(format!("missing parameter `{path}`"))),
        };
        Ok(if self.store.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }

    pub(crate) fn adapter(&self) -> Option<LoraAdapter> {
        self.adapters.and_then(|set| set.adapter(&self.prefix))
    }
}
