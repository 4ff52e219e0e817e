//! Parameterized building blocks. Each layer only holds [`ParamId`]s; values
//! live in the owning [`ParamStore`] and are bound per graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::init;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` on `[rows, in]` inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), init::xavier_uniform(&[d_in, d_out], d_in, d_out, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p[self.w]);
        match self.b {
            Some(b) => g.add_last_bias(y, p[b]),
            None => y,
        }
    }
}

/// Length-preserving dilated 1D convolution on `[channels, time]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), init::fan_in_uniform(&[c_out, c_in, kernel], c_in * kernel, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Self { w, b, dilation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.conv1d_same(x, p[self.w], self.dilation);
        match self.b {
            Some(b) => g.add_first_bias(y, p[b]),
            None => y,
        }
    }
}

/// 2D convolution on `[channels, height, width]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let w = store.add(format!("{name}.weight"), init::fan_in_uniform(&[c_out, c_in, kernel.0, kernel.1], fan_in, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = g.conv2d(x, p[self.w], self.stride, self.pad);
        g.add_first_bias(y, p[self.b])
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), init::normal(&[vocab, dim], (dim as f64).powf(-0.5), rng));
        Self { table, vocab }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Var {
        g.gather_rows(p[self.table], ids)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta], Self::EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 5, true, &mut rng);
        store.get_mut(lin.b.unwrap()).data_mut()[0] = 2.0;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&mut g, &p, x);
        assert_eq!(g.shape(y), &[4, 5]);
        assert_eq!(g.value(y).at2(3, 0), 2.0);
    }

    #[test]
    fn conv_preserves_length() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = Conv1d::new(&mut store, "c", 2, 4, 13, 8, true, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 50]));
        let y = c.forward(&mut g, &p, x);
        assert_eq!(g.shape(y), &[4, 50]);
    }
}
