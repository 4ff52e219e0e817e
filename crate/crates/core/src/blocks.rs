//! Transformer pieces shared by the acoustic model, plus seeded RNG streams.

use cantus_nn::layers::{Conv1d, LayerNorm, Linear};
use cantus_nn::{Bound, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Independent deterministic stream for `(seed, step, purpose, item)`.
///
/// Each worker derives its own generator, so results do not depend on
/// thread scheduling.
pub fn rng_stream(seed: u64, step: u64, purpose: u8, item: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 24) ^ ((purpose as u64) << 16) ^ item as u64);
    rng
}

/// Inverted dropout with a constant mask; identity when `rng` is `None` or `p == 0`.
pub fn dropout(g: &mut Graph, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask = Tensor::from_fn(g.shape(x), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
            let m = g.constant(mask);
            g.mul(x, m)
        }
        _ => x,
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Multi-head self-attention on `[len, hidden]` rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && hidden.is_multiple_of(heads), "hidden {hidden} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), hidden, hidden, true, rng),
            k: Linear::new(store, &format!("{name}.k"), hidden, hidden, true, rng),
            v: Linear::new(store, &format!("{name}.v"), hidden, hidden, true, rng),
            o: Linear::new(store, &format!("{name}.o"), hidden, hidden, true, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let hidden = g.shape(x)[1];
        let dh = hidden / self.heads;
        let q = self.q.forward(g, p, x);
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.k.forward(g, p, x);
        let v = self.v.forward(g, p, x);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let scores = g.matmul_t(qh, kh, false, true);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, p, cat)
    }
}

/// Self-attention and a two-layer 1D convolution, each with residual + layer norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FftBlock {
    pub attn: SelfAttention,
    pub norm1: LayerNorm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
}

impl FftBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        filter: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: SelfAttention::new(store, &format!("{name}.attn"), hidden, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), hidden),
            conv1: Conv1d::new(store, &format!("{name}.conv1"), hidden, filter, kernel, 1, true, rng),
            conv2: Conv1d::new(store, &format!("{name}.conv2"), filter, hidden, 1, 1, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, drop: f64, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let a = self.attn.forward(g, p, x);
        let a = dropout(g, a, drop, rng.as_deref_mut());
        let h = g.add(x, a);
        let h = self.norm1.forward(g, p, h);
        let ht = g.transpose(h);
        let f = self.conv1.forward(g, p, ht);
        let f = g.relu(f);
        let f = self.conv2.forward(g, p, f);
        let f = g.transpose(f);
        let f = dropout(g, f, drop, rng);
        let out = g.add(h, f);
        self.norm2.forward(g, p, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a = rng_stream(7, 3, 1, 0).next_u64();
        assert_eq!(a, rng_stream(7, 3, 1, 0).next_u64());
        assert_ne!(a, rng_stream(7, 4, 1, 0).next_u64());
        assert_ne!(a, rng_stream(7, 3, 2, 0).next_u64());
        assert_ne!(a, rng_stream(7, 3, 1, 1).next_u64());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.at2(0, 0), 0.0);
        assert_eq!(pe.at2(0, 1), 1.0);
        assert!((pe.at2(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.at2(1, 3) - (0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[50, 40], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = dropout(&mut g, x, 0.25, Some(&mut rng));
        let v = g.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-12));
        let kept = v.data().iter().filter(|&&e| e > 0.0).count() as f64 / 2000.0;
        assert!((kept - 0.75).abs() < 0.05);
        let z = dropout(&mut g, x, 0.25, None);
        assert_eq!(z, x);
    }

    #[test]
    fn attention_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk = FftBlock::new(&mut store, "b", 8, 2, 16, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.3).sin()));
        let y = blk.forward(&mut g, &p, x, 0.0, None);
        assert_eq!(g.shape(y), &[5, 8]);
    }
}
