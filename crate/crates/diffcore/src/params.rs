use std::collections::HashMap;

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen parameters still pass gradients through but are skipped by optimizers.
    pub trainable: bool,
}

/// Ordered, named collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::domain("param_store", format!("duplicate parameter {name}")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Records every parameter on `tape`; the result maps `ParamId` to its `Var`.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(&p.tensor)).collect())
    }

    /// Adds the tape's gradients for every bound parameter into `Tensor::grad`.
    pub fn accumulate(&mut self, grads: Vec<Option<Vec<f32>>>) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.tensor.accumulate_grad_vec(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Replaces tensor values by name; shapes must match exactly.
    pub fn load_values(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        if records.len() != self.params.len() {
            return Err(DiffError::Format(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                records.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .id(&name)
                .ok_or_else(|| DiffError::Format(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].tensor;
            if slot.shape() != t.shape() {
                return Err(DiffError::shape("load_values", slot.shape(), t.shape()));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Order-sensitive FNV-style checksum over every bit of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.tensor.data() {
                h ^= u64::from(v.to_bits());
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Copies out the gradient of each bound parameter.
    pub fn grads(&self, tape: &Tape<'_>) -> Vec<Option<Vec<f32>>> {
        self.0.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect()
    }

    /// Like [`Bound::grads`] but moves the buffers out instead of copying.
    pub fn take_grads(&self, tape: &mut Tape<'_>) -> Vec<Option<Vec<f32>>> {
        self.0.iter().map(|&v| tape.take_grad(v)).collect()
    }
}
