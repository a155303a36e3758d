use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{GagError, Result};

use super::scalar::Scalar;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named parameter tensors with a freeze flag. A frozen set can still be read
/// by any number of forward passes but never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
    frozen: bool,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            frozen: false,
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| GagError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        if self.frozen {
            return Err(GagError::Frozen(format!("write to {name}")));
        }
        self.tensors
            .get_mut(name)
            .ok_or_else(|| GagError::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen,
        }
    }

    /// SHA-256 over names, shapes and little-endian values, in name order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor as a tape leaf. Leaves require gradients only when
    /// `trainable` is set and the set is not frozen.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        let rg = trainable && !self.frozen;
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), rg)))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} was not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| GagError::Config(format!("missing parameter {name}")))
    }

    /// Gradient per parameter name; parameters that did not influence the
    /// loss get zeros.
    pub fn grads<F: Scalar>(&self, tape: &Tape<F>, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Elementwise running sum of gradient maps.
pub fn accumulate_grads<F: Scalar>(into: &mut BTreeMap<String, Tensor<F>>, from: BTreeMap<String, Tensor<F>>) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(k, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_set_rejects_writes() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2]));
        p.freeze();
        assert!(matches!(p.get_mut("w"), Err(GagError::Frozen(_))));
    }

    #[test]
    fn hash_changes_with_values() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2]));
        let h0 = p.content_hash();
        p.get_mut("w").unwrap().data_mut()[1] = 1.0;
        assert_ne!(h0, p.content_hash());
    }

    #[test]
    fn frozen_bind_records_no_gradients() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        p.freeze();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        assert!(!tape.requires_grad(b.var("w")));
    }
}
