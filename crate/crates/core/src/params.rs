//! Named trainable parameters, their gradients and momentum buffers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
    momentum: Tensor,
}

/// Registry of named parameters. Names are unique and registration order is
/// stable, which keeps checkpoints and parameter counts reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

/// Hyper-parameters of one momentum SGD update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: Real,
    pub momentum: Real,
    pub weight_decay: Real,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(contract!("parameter {name:?} registered twice"));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name,
            value,
            grad,
            momentum,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of named parameter tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn momentum(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].momentum
    }

    /// Replaces a value (and optionally its momentum buffer), keeping shapes.
    pub fn load(&mut self, name: &str, value: Tensor, momentum: Option<Tensor>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| contract!("unknown parameter {name:?}"))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(contract!(
                "parameter {name:?} has shape {:?}, got {:?}",
                entry.value.shape(),
                value.shape()
            ));
        }
        if let Some(m) = momentum {
            if m.shape() != value.shape() {
                return Err(contract!("momentum for {name:?} has shape {:?}", m.shape()));
            }
            entry.momentum = m;
        }
        entry.value = value;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[Real]) {
        let g = self.entries[id.0].grad.data_mut();
        debug_assert_eq!(g.len(), grad.len());
        for (a, b) in g.iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`,
    /// then clears the gradients.
    pub fn sgd_momentum_step(&mut self, cfg: &SgdConfig) {
        for e in &mut self.entries {
            let values = e.value.data_mut();
            let grads = e.grad.data_mut();
            let velocity = e.momentum.data_mut();
            for ((p, g), v) in values.iter_mut().zip(grads.iter_mut()).zip(velocity.iter_mut()) {
                *v = cfg.momentum * *v + *g + cfg.weight_decay * *p;
                *p -= cfg.lr * *v;
                *g = 0.0;
            }
        }
    }

    /// Sorted `(name, value)` listing, handy for diffing two stores.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|e| (e.name.to_string(), e.value.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
