//! Low-rank adapters: a frozen weight `W` is adapted as
//! `W + (alpha / rank) · B · A` with `A: (rank, in)` and `B: (out, rank)`.
//! `B` starts at zero so a freshly attached adapter is the identity.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};

use crate::nn::{Init, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    a: Tensor,
    b: Tensor,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha/rank)·B·A` as an `(out, in)` matrix.
    pub fn delta(&self) -> candle_core::Result<Tensor> {
        self.b.matmul(&self.a)? * self.scale()
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn trainable_values(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }
}

/// The adapters attached to one network, backed by their own trainable store.
pub struct LoraSet {
    store: ParamStore,
    adapters: BTreeMap<String, LoraAdapter>,
    rank: usize,
    alpha: f64,
    merged: bool,
}

impl LoraSet {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn adapter(&self, target: &str) -> Option<LoraAdapter> {
        if self.merged {
            return None;
        }
        self.adapters.get(target).cloned()
    }

    pub fn trainable_values(&self) -> usize {
        self.adapters.values().map(LoraAdapter::trainable_values).sum()
    }

    /// Rebuilds a set from saved `target.lora_a` / `target.lora_b` tensors.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, rank: usize, alpha: f64, dtype: DType) -> Result<Self> {
        let store = ParamStore::from_tensors(tensors, dtype, true)?;
        let mut adapters = BTreeMap::new();
        for name in store.names() {
            if let Some(target) = name.strip_suffix(".lora_a") {
                let b_name = format!("{target}.lora_b");
                let (a, b) = match (store.get(&name), store.get(&b_name)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Checkpoint(format!("adapter `{target}` is missing B"))),
                };
                adapters.insert(
                    target.to_string(),
                    LoraAdapter { target: target.to_string(), rank, alpha, a, b },
                );
            }
        }
        Ok(Self { store, adapters, rank, alpha, merged: false })
    }
}

/// Creates one adapter per target path. Every target must name a linear
/// (`(out, in)`) or convolution (`(out, in, k, k)`) weight in `base`.
pub fn attach_lora(base: &ParamStore, targets: &[String], rank: usize, alpha: f64, seed: u64) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be >= 1"));
    }
    let store = ParamStore::new(seed, base.dtype(), true);
    let mut adapters = BTreeMap::new();
    for target in targets {
        let weight = base
            .get(&format!("{target}.weight"))
            .ok_or_else(|| Error::UnknownTarget(target.clone()))?;
        let dims = weight.dims();
        if dims.len() != 2 && dims.len() != 4 {
            return Err(Error::UnknownTarget(format!("{target} (not a linear or conv weight)")));
        }
        let out_dim = dims[0];
        let in_dim: usize = dims[1..].iter().product();
        let vb = store.root().pp(target);
        let a = vb.get(&[rank, in_dim], "lora_a", Init::FanIn(in_dim))?;
        let b = vb.get(&[out_dim, rank], "lora_b", Init::Zeros)?;
        adapters.insert(target.clone(), LoraAdapter { target: target.clone(), rank, alpha, a, b });
    }
    Ok(LoraSet { store, adapters, rank, alpha, merged: false })
}

/// Folds every adapter into its base weight. The set is marked merged and
/// stops contributing to forward passes; merging again is an error.
pub fn merge_lora(base: &BTreeMap<String, Tensor>, set: &mut LoraSet) -> Result<BTreeMap<String, Tensor>> {
    if set.merged {
        return Err(Error::AlreadyMerged);
    }
    let mut out = base.clone();
    for (target, adapter) in &set.adapters {
        let key = format!("{target}.weight");
        let w = out
            .get(&key)
            .ok_or_else(|| Error::UnknownTarget(target.clone()))?;
        let merged = (w + adapter.delta()?.detach().reshape(w.shape())?)?;
        out.insert(key, merged);
    }
    set.merged = true;
    Ok(out)
}

/// Layer paths in `base` that end in one of `suffixes` and hold a linear or
/// conv weight, optionally restricted to a path prefix.
pub fn select_targets(base: &ParamStore, prefix: &str, suffixes: &[&str]) -> Vec<String> {
    base.names()
        .iter()
        .filter_map(|n| n.strip_suffix(".weight"))
        .filter(|p| p.starts_with(prefix))
        .filter(|p| suffixes.iter().any(|s| p.ends_with(s)))
        .filter(|p| {
            base.get(&format!("{p}.weight"))
                .map(|w| matches!(w.rank(), 2 | 4))
                .unwrap_or(false)
        })
        .map(str::to_string)
        .collect()
}
