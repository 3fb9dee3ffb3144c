use std::collections::HashMap;

use crate::error::{Result, SlrError};
use crate::numeric::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
    /// Buffers such as running normalization statistics are stored alongside
    /// weights but never touched by the optimizer.
    pub trainable: bool,
}

/// Named registry of model weights with one gradient buffer per entry.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: NdArray) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: NdArray, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = NdArray::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.params[id.0].trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.params[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Add per-parameter gradients (as produced by one tape) into the buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (id, g) in &grads.0 {
            self.params[id.0].grad.axpy(1.0, g);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Replace values by name from another store; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id_of(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| {
                    SlrError::Config(format!("checkpoint lacks parameter {}", p.name))
                })?;
            if src.value.shape() != p.value.shape() {
                return Err(SlrError::dim(
                    "load_from",
                    p.value.shape(),
                    src.value.shape(),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Sparse map from parameter to gradient produced by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, NdArray)>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&NdArray> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}
