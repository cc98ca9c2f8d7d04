//! Learnable parameters and the named groups that own them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use crate::tensor::{Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
pub struct ParamSlot<T> {
    id: u64,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Non-trainable slots (batch-norm running statistics) are saved and
    /// cloned with the network but never receive gradients.
    pub trainable: bool,
}

impl<T> ParamSlot<T> {
    pub fn id(&self) -> u64 {
        self.id
    }
}

/// Shared handle to one parameter tensor. Two handles compare equal only if
/// they point at the same storage (tied weights).
#[derive(Debug)]
pub struct Param<T>(Arc<RwLock<ParamSlot<T>>>);

impl<T> Clone for Param<T> {
    fn clone(&self) -> Self {
        Self(Arc::clone(&self.0))
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self(Arc::new(RwLock::new(ParamSlot {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            grad,
            trainable,
        })))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, ParamSlot<T>> {
        self.0.read().expect("parameter lock poisoned")
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, ParamSlot<T>> {
        self.0.write().expect("parameter lock poisoned")
    }

    pub fn id(&self) -> u64 {
        self.read().id
    }

    pub fn is_trainable(&self) -> bool {
        self.read().trainable
    }

    pub fn same_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Independent copy (new storage, new id) of value and gradient.
    pub fn deep_clone(&self) -> Self {
        let slot = self.read();
        let copy = Self::new(slot.value.clone(), slot.trainable);
        copy.write().grad = slot.grad.clone();
        copy
    }
}

/// Ordered, named set of parameters belonging to one network.
///
/// While `frozen` is set, graph backward passes leave every parameter
/// gradient in the group untouched; gradients still flow through the ops
/// that read the parameters.
#[derive(Debug)]
pub struct ParamGroup<T> {
    entries: Vec<(String, Param<T>)>,
    frozen: bool,
}

impl<T: Scalar> Default for ParamGroup<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            frozen: false,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, param: Param<T>) -> usize {
        self.entries.push((name.into(), param));
        self.entries.len() - 1
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.entries[index].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Points entry `index` at another parameter's storage.
    pub fn replace(&mut self, index: usize, param: Param<T>) {
        self.entries[index].1 = param;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.entries {
            p.write().grad.fill(T::zero());
        }
    }

    /// Largest absolute gradient entry over all trainable parameters.
    pub fn max_abs_grad(&self) -> T {
        self.entries
            .iter()
            .map(|(_, p)| p.read().grad.max_abs())
            .fold(T::zero(), T::max)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p.read().value.len())
            .sum()
    }

    /// Deep copy: fresh storage for every entry, tied entries become untied.
    pub fn deep_clone(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| (n.clone(), p.deep_clone()))
                .collect(),
            frozen: self.frozen,
        }
    }
}
