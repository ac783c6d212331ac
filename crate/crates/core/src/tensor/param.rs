use std::collections::HashSet;
use std::sync::{Arc, RwLock, RwLockReadGuard};

use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

struct ParamInner {
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// A named trainable tensor shared by reference.
///
/// Cloning a `Param` clones the handle, not the storage: two layers holding
/// clones of the same `Param` share weights (see [`Param::ptr_eq`]).
#[derive(Clone)]
pub struct Param(Arc<RwLock<ParamInner>>);

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.read();
        f.debug_struct("Param")
            .field("name", &inner.name)
            .field("shape", &inner.value.shape())
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param(Arc::new(RwLock::new(ParamInner {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        })))
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        let p = Param::new(name, value);
        p.set_requires_grad(false);
        p
    }

    fn read(&self) -> RwLockReadGuard<'_, ParamInner> {
        self.0.read().expect("param lock poisoned")
    }

    pub fn name(&self) -> String {
        self.read().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.read().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.read().value.numel()
    }

    pub fn value(&self) -> Tensor {
        self.read().value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.read().value)
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut inner = self.0.write().expect("param lock poisoned");
        if inner.value.shape() != value.shape() {
            return Err(Error::shape("set_value", inner.value.shape(), value.shape()));
        }
        inner.value = value;
        Ok(())
    }

    /// Mutate a single element; used by finite-difference probes.
    pub(crate) fn set_element(&self, idx: usize, v: f64) {
        self.0.write().expect("param lock poisoned").value.data_mut()[idx] = v;
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.read().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.write().expect("param lock poisoned").grad = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.0.write().expect("param lock poisoned");
        if !inner.requires_grad {
            return;
        }
        match &mut inner.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, b)| *a += b),
            None => {
                let shape = inner.value.shape().to_vec();
                inner.grad = Some(Tensor::new(&shape, g.to_vec()).expect("grad shape"));
            }
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.read().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        let mut inner = self.0.write().expect("param lock poisoned");
        inner.requires_grad = on;
        if !on {
            inner.grad = None;
        }
    }

    /// Update value in place given the current gradient (optimizer hook).
    pub fn update(&self, f: impl FnOnce(&mut Tensor, Option<&Tensor>)) {
        let mut inner = self.0.write().expect("param lock poisoned");
        let ParamInner { value, grad, .. } = &mut *inner;
        f(value, grad.as_ref());
    }

    pub fn ptr_eq(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn id(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }
}

/// Ordered, de-duplicated collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    seen: HashSet<usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: &Param) {
        if self.seen.insert(p.id()) {
            self.params.push(p.clone());
        }
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for p in &other.params {
            self.push(p);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, p: &Param) -> bool {
        self.seen.contains(&p.id())
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Param::zero_grad);
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.params.iter().for_each(|p| p.set_requires_grad(on));
    }

    pub fn as_slice(&self) -> &[Param] {
        &self.params
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name(), p.value())).collect()
    }

    /// Overwrite parameter values from `(name, tensor)` pairs. Every
    /// parameter in the set must be present.
    pub fn load(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &self.params {
            let name = p.name();
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks tensor {name}")))?;
            p.set_value(t.clone())?;
        }
        Ok(())
    }

    pub fn checksum(&self) -> String {
        checksum(self.params.iter())
    }
}

/// SHA-256 over names, shapes and little-endian values.
pub fn checksum<'a>(params: impl Iterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name().as_bytes());
        p.with_value(|t| {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        });
    }
    hex::encode(h.finalize())
}
