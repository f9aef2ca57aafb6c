use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

pub const BN_EPS: f64 = 1e-3;
/// Weight of the previous running statistic in the exponential average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Seen through `sign` in the forward pass (BNN layers).
    pub binarized: bool,
}

/// Running mean and variance of one batch-normalisation layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnState {
    pub fn new(name: &str, channels: usize) -> Self {
        BnState {
            name: name.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
    bn: Vec<BnState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, binarized: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            binarized,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_bn(&mut self, name: &str, channels: usize) -> usize {
        self.bn.push(BnState::new(name, channels));
        self.bn.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_id(&self, name: &str) -> Option<usize> {
        self.bn.iter().position(|b| b.name == name)
    }

    pub fn bn(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Rebuilds a store from serialized parts, checking names are unique.
    pub fn from_parts(params: Vec<Param>, bn: Vec<BnState>) -> Result<Self> {
        let mut store = ParamStore::new();
        for p in params {
            store.add(&p.name, p.value, p.binarized)?;
        }
        store.bn = bn;
        Ok(store)
    }
}
