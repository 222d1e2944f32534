//! Named parameter storage shared between tapes and the optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::tape::Tape;
use crate::tensor::{axpy, Tensor};

/// Index of a parameter in a [`ParamStore`]. Two modules holding the same id
/// share (alias) one tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.numel() != data.len() {
            return Err(HstError::Dimension {
                op: "param_set",
                lhs: t.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        t.data = data;
        Ok(())
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Total scalar count over distinct tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Adds the gradients of every parameter bound on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, var) in tape.bound_params() {
            let Some(g) = tape.grad(var) else { continue };
            let t = &mut self.entries[id.0].tensor;
            match &mut t.grad {
                Some(acc) => axpy(1.0, g, acc),
                None => t.grad = Some(g.to_vec()),
            }
        }
    }

    /// Multiplies every accumulated gradient by `c` (e.g. batch averaging).
    pub fn scale_grads(&mut self, c: f64) {
        for e in &mut self.entries {
            if let Some(g) = &mut e.tensor.grad {
                g.iter_mut().for_each(|x| *x *= c);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Euclidean norm over all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.tensor.grad.as_ref())
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliased_param_binds_one_leaf() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape);
        assert_eq!(store.get(w).grad.as_deref(), Some(&[2.0, 2.0][..]));
        store.accumulate_grads(&tape);
        assert_eq!(store.get(w).grad.as_deref(), Some(&[4.0, 4.0][..]));
        store.zero_grad();
        assert!(store.get(w).grad.is_none());
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.0]));
        store.set_trainable(w, false);
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let l = tape.sum(a);
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape);
        assert!(store.get(w).grad.is_none());
        assert_eq!(store.trainable_numel(), 0);
    }
}
