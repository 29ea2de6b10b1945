use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Role of a parameter; only `Weight` parameters enter the L2 penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("ParamSet::insert", format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value,
            grad,
            trainable: true,
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.by_name(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::invalid("ParamSet::value", format!("no parameter named {name}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Order-sensitive checksum over every value bit pattern.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
