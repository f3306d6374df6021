//! Named learnable parameters and non-learnable buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Gradients, Graph, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owns every parameter and buffer of a model, addressed by id or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
    names: BTreeMap<String, Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate name `{name}`");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.names.insert(name.clone(), Slot::Param(self.params.len()));
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate name `{name}`");
        self.names.insert(name.clone(), Slot::Buffer(self.buffers.len()));
        self.buffers.push(Buffer { name, value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.dot(&p.grad))
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the value of a named parameter or buffer, checking its shape.
    pub fn load_named(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = *self
            .names
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let target = match slot {
            Slot::Param(i) => &mut self.params[i].value,
            Slot::Buffer(i) => &mut self.buffers[i].value,
        };
        if target.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                target.shape()
            )));
        }
        *target = value;
        Ok(())
    }

    /// All named tensors, parameters first, each in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), &b.value)))
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
        for b in &mut self.buffers {
            b.value.round_to_f32();
        }
    }

    /// Binds a parameter as a gradient-receiving leaf of `graph`.
    pub fn bind(&self, graph: &Graph, id: ParamId) -> Var {
        graph.param_leaf(self.params[id.0].value.clone(), id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_bound_param_grads() {
        let mut store = ParamStore::new();
        let w = store.add_param("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        for _ in 0..2 {
            let g = Graph::new();
            let wv = store.bind(&g, w);
            let sq = g.mul(&wv, &wv);
            let loss = g.sum(&sq);
            let grads = g.backward(&loss).unwrap();
            store.accumulate(&grads);
        }
        assert_eq!(store.param(w).grad.data(), &[4.0, -8.0]);
        store.zero_grad();
        assert_eq!(store.param(w).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn load_named_checks_shape() {
        let mut store = ParamStore::new();
        store.add_param("a", Tensor::zeros(vec![2, 2]));
        store.add_buffer("b", Tensor::zeros(vec![3]));
        assert!(store.load_named("a", Tensor::ones(vec![4])).is_err());
        assert!(store.load_named("missing", Tensor::ones(vec![4])).is_err());
        store.load_named("b", Tensor::ones(vec![3])).unwrap();
        assert_eq!(store.buffers()[0].value.sum(), 3.0);
    }
}
