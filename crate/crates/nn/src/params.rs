use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::graph::{Grads, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors owned by one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Order-sensitive hash of the exact bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.values {
            for v in t.data() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Replaces all values, checking names and shapes line up.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        if other.names != self.names {
            return Err("parameter names differ".into());
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(format!("parameter {} has shape {:?}, expected {:?}", self.names[i], b.shape(), a.shape()));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// Inserts every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| g.leaf(t.clone())).collect() }
    }

    /// Inserts every parameter into `g` as a constant (no gradient).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| g.constant(t.clone())).collect() }
    }
}

/// Parameters of one store, placed into a particular [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Gradients for every parameter, zero where none flowed.
    pub fn grads(&self, grads: &Grads, store: &ParamStore) -> GradSet {
        GradSet(
            self.vars.iter().zip(store.values()).map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect(),
        )
    }
}

/// Gradient tensors aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet(pub Vec<Tensor>);

impl GradSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.values().iter().map(|t| Tensor::zeros(t.shape())).collect())
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|t| t.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / (n + 1e-6));
        }
        n
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    /// Sums per-item gradients in index order.
    pub fn sum_ordered(items: Vec<GradSet>) -> Option<GradSet> {
        let mut it = items.into_iter();
        let mut acc = it.next()?;
        for g in it {
            acc.add_assign(&g);
        }
        Some(acc)
    }
}
