//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes whose
//! inputs do not require gradients are stored as constants and skipped by
//! [`Graph::backward`].

use crate::conv::{self, Conv1dGeom, Conv2dGeom, SharedUpsampleGeom};
use crate::linalg::{gemm_into, MatRef};
use crate::spectral::{self, StftConfig, StftSaved};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Square,
    Sqrt,
    Softplus,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Softplus => softplus(x),
        }
    }

    /// d(out)/d(in) from the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu(s) => {
                if x >= 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Softplus => sigmoid(x),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x[.., c] + b[c]`
    AddLastBias(Var, Var),
    /// `x[c, ..] + b[c]`
    AddFirstBias(Var, Var),
    /// `a * x + b`
    Affine(Var, f64),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Conv1d {
        x: Var,
        w: Var,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Conv2dGeom,
    },
    SharedUpsample {
        x: Var,
        k: Var,
        geom: SharedUpsampleGeom,
    },
    Gated(Var),
    StftMag {
        x: Var,
        cfg: StftConfig,
        saved: Box<StftSaved>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Number of leaves created with [`Graph::leaf`].
    pub fn trainable_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad && matches!(n.op, Op::Leaf)).count()
    }

    /// Stops gradient flow: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on shapes {:?} and {:?}", va.shape(), vb.shape());
        let out = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds `b` (length = last dim of `x`) to every row.
    pub fn add_last_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = *vx.shape().last().expect("bias on scalar");
        assert_eq!(vb.len(), c, "bias length mismatch");
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddLastBias(x, b), rg)
    }

    /// Adds `b[c]` to every element of channel `c` of a channel-first tensor.
    pub fn add_first_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = vx.shape()[0];
        assert_eq!(vb.len(), c, "bias length mismatch");
        let per = vx.len() / c;
        let mut out = vx.clone();
        for (ch, row) in out.data_mut().chunks_mut(per).enumerate() {
            let bv = vb.data()[ch];
            row.iter_mut().for_each(|o| *o += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddFirstBias(x, b), rg)
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + offset);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Var {
        let out = self.value(x).map(|v| u.apply(v));
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, u), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Sums a non-empty list of same-shaped vars.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut it = vars.iter().copied();
        let first = it.next().expect("add_all of empty list");
        it.fold(first, |acc, v| self.add(acc, v))
    }

    /// `op(a) @ op(b)` on matrices, where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut am = MatRef::dense(va.data(), va.rows(), va.cols());
        let mut bm = MatRef::dense(vb.data(), vb.rows(), vb.cols());
        if ta {
            am = am.t();
        }
        if tb {
            bm = bm.t();
        }
        assert_eq!(
            am.cols,
            bm.rows,
            "matmul inner dims {:?}{} x {:?}{}",
            va.shape(),
            if ta { "^T" } else { "" },
            vb.shape(),
            if tb { "^T" } else { "" }
        );
        let (m, n) = (am.rows, bm.cols);
        let mut out = vec![0.0; m * n];
        gemm_into(1.0, am, bm, 0.0, &mut out, 0, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose2();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_cols(start, end);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols(x, start), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        let rg = self.rg(x);
        self.push(out, Op::SliceRows(x, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut c0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + c0..r * total + c0 + w].copy_from_slice(v.row(r));
            }
            c0 += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, total], out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&[rows, cols], out), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row gather: `out[i] = x[idx[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < v.rows(), "gather index {i} out of {} rows", v.rows());
            out.extend_from_slice(v.row(i));
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[idx.len(), c], out), Op::GatherRows(x, idx.to_vec()), rg)
    }

    /// Layer normalization over the last dimension of a `[rows, cols]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Tensor::new(&[r, c], out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = v.cols();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::Softmax(x), rg)
    }

    /// Dilated 1D convolution of `x: [c_in, len]` with `w: [c_out, c_in, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, pad_left: usize, pad_right: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 2, "conv1d input must be [c, t]");
        assert_eq!(vw.ndim(), 3, "conv1d weight must be [o, i, k]");
        assert_eq!(vx.shape()[0], vw.shape()[1], "conv1d channel mismatch");
        let geom = Conv1dGeom {
            c_in: vw.shape()[1],
            c_out: vw.shape()[0],
            len: vx.shape()[1],
            kernel: vw.shape()[2],
            dilation,
            pad_left,
            pad_right,
        };
        let out = conv::conv1d_forward(vx.data(), vw.data(), &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&[geom.c_out, geom.out_len()], out), Op::Conv1d { x, w, geom }, rg)
    }

    /// Length-preserving ("same") dilated convolution; kernel must be odd.
    pub fn conv1d_same(&mut self, x: Var, w: Var, dilation: usize) -> Var {
        let k = self.value(w).shape()[2];
        assert!(k % 2 == 1, "same-padding needs an odd kernel");
        let pad = dilation * (k - 1) / 2;
        self.conv1d(x, w, dilation, pad, pad)
    }

    /// 2D convolution of `x: [c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(vw.ndim(), 4, "conv2d weight must be [o, i, kh, kw]");
        assert_eq!(vx.shape()[0], vw.shape()[1], "conv2d channel mismatch");
        let geom = Conv2dGeom {
            c_in: vw.shape()[1],
            c_out: vw.shape()[0],
            height: vx.shape()[1],
            width: vx.shape()[2],
            kernel: (vw.shape()[2], vw.shape()[3]),
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = conv::conv2d_forward(vx.data(), vw.data(), &geom);
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&[geom.c_out, ho, wo], out), Op::Conv2d { x, w, geom }, rg)
    }

    /// Transposed 1D convolution of every row of `x: [c, t]` with one shared kernel `k`.
    pub fn shared_upsample(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Var {
        let (vx, vk) = (self.value(x), self.value(k));
        let geom = SharedUpsampleGeom { channels: vx.shape()[0], len: vx.shape()[1], kernel: vk.len(), stride, pad };
        let out = conv::conv_transpose_shared_forward(vx.data(), vk.data(), &geom);
        let rg = self.rg(x) || self.rg(k);
        self.push(Tensor::new(&[geom.channels, geom.out_len()], out), Op::SharedUpsample { x, k, geom }, rg)
    }

    /// WaveNet gate: `tanh(x[..c]) * sigmoid(x[c..])` for `x: [2c, t]`.
    pub fn gated(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (c2, t) = (v.shape()[0], v.shape()[1]);
        assert!(c2 % 2 == 0, "gated activation needs an even channel count");
        let c = c2 / 2;
        let d = v.data();
        let out: Vec<f64> = (0..c * t).map(|i| d[i].tanh() * sigmoid(d[c * t + i])).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, t], out), Op::Gated(x), rg)
    }

    /// Magnitude STFT `[frames, bins]` of a 1D signal.
    pub fn stft_mag(&mut self, x: Var, cfg: &StftConfig) -> Var {
        let v = self.value(x);
        let saved = spectral::stft_mag_forward(v.data(), cfg);
        let out = Tensor::new(&[saved.frames, cfg.bins()], saved.mag.clone());
        let rg = self.rg(x);
        self.push(out, Op::StftMag { x, cfg: cfg.clone(), saved: Box::new(saved) }, rg)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Grads { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            // leaves keep their gradients; interior grads are dropped once used
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if self.rg(*a) {
                    send(*a, g.zip_map(vb, |x, y| x / y));
                }
                if self.rg(*b) {
                    let gb = g.zip_map(&node.value, |x, q| x * q).zip_map(vb, |x, y| -x / y);
                    send(*b, gb);
                }
            }
            Op::AddLastBias(x, b) => {
                if self.rg(*b) {
                    let c = val(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, Tensor::new(val(*b).shape(), gb));
                }
                send(*x, g.clone());
            }
            Op::AddFirstBias(x, b) => {
                if self.rg(*b) {
                    let c = val(*b).len();
                    let per = g.len() / c;
                    let gb: Vec<f64> = g.data().chunks(per).map(|r| r.iter().sum()).collect();
                    send(*b, Tensor::new(val(*b).shape(), gb));
                }
                send(*x, g.clone());
            }
            Op::Affine(x, s) => send(*x, g.map(|v| v * s)),
            Op::Unary(x, u) => {
                let vx = val(*x);
                let gd: Vec<f64> =
                    g.data().iter().zip(vx.data()).zip(node.value.data()).map(|((gv, xv), yv)| gv * u.derivative(*xv, *yv)).collect();
                send(*x, Tensor::new(vx.shape(), gd));
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                send(*x, Tensor::full(val(*x).shape(), g.item() / n));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let gm = MatRef::dense(g.data(), g.rows(), g.cols());
                let am = MatRef::dense(va.data(), va.rows(), va.cols());
                let bm = MatRef::dense(vb.data(), vb.rows(), vb.cols());
                let opb = if *tb { bm.t() } else { bm };
                let opa = if *ta { am.t() } else { am };
                if self.rg(*a) {
                    // d op(A) = G op(B)^T; if A was transposed, dA = op(B) G^T
                    let (prod_a, prod_b) = if *ta { (opb, gm.t()) } else { (gm, opb.t()) };
                    let mut out = vec![0.0; va.len()];
                    gemm_into(1.0, prod_a, prod_b, 0.0, &mut out, 0, va.cols());
                    send(*a, Tensor::new(va.shape(), out));
                }
                if self.rg(*b) {
                    // d op(B) = op(A)^T G; if B was transposed, dB = G^T op(A)
                    let (prod_a, prod_b) = if *tb { (gm.t(), opa) } else { (opa.t(), gm) };
                    let mut out = vec![0.0; vb.len()];
                    gemm_into(1.0, prod_a, prod_b, 0.0, &mut out, 0, vb.cols());
                    send(*b, Tensor::new(vb.shape(), out));
                }
            }
            Op::Transpose(x) => send(*x, g.transpose2()),
            Op::Reshape(x) => send(*x, g.clone().reshaped(val(*x).shape())),
            Op::SliceCols(x, start) => {
                let vx = val(*x);
                let (r, c) = (vx.rows(), vx.cols());
                let w = g.cols();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                send(*x, Tensor::new(&[r, c], out));
            }
            Op::SliceRows(x, start) => {
                let vx = val(*x);
                let c = vx.cols();
                let mut out = vec![0.0; vx.len()];
                out[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*x, Tensor::new(vx.shape(), out));
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        send(p, g.slice_cols(c0, c0 + w));
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if self.rg(p) {
                        send(p, g.slice_rows(r0, r0 + r));
                    }
                    r0 += r;
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = val(*x);
                let c = vx.cols();
                let mut out = vec![0.0; vx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, gv) in out[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                send(*x, Tensor::new(vx.shape(), out));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma).data();
                let (r, c) = (g.rows(), g.cols());
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            gg[j] += gv * xhat[i * c + j];
                            gb[j] += gv;
                        }
                    }
                    send(*gamma, Tensor::new(val(*gamma).shape(), gg));
                    send(*beta, Tensor::new(val(*beta).shape(), gb));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let gh = g.data()[i * c + j] * gam[j];
                            m1 += gh;
                            m2 += gh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let gh = g.data()[i * c + j] * gam[j];
                            gx[i * c + j] = rstd[i] * (gh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                    send(*x, Tensor::new(&[r, c], gx));
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, Tensor::new(y.shape(), gx));
            }
            Op::Conv1d { x, w, geom } => {
                let (gx, gw) = conv::conv1d_backward(val(*x).data(), val(*w).data(), g.data(), geom, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    send(*x, Tensor::new(val(*x).shape(), gx));
                }
                if let Some(gw) = gw {
                    send(*w, Tensor::new(val(*w).shape(), gw));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) = conv::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), geom, self.rg(*x), self.rg(*w));
                if let Some(gx) = gx {
                    send(*x, Tensor::new(val(*x).shape(), gx));
                }
                if let Some(gw) = gw {
                    send(*w, Tensor::new(val(*w).shape(), gw));
                }
            }
            Op::SharedUpsample { x, k, geom } => {
                let (gx, gk) = conv::conv_transpose_shared_backward(val(*x).data(), val(*k).data(), g.data(), geom);
                send(*x, Tensor::new(val(*x).shape(), gx));
                send(*k, Tensor::new(val(*k).shape(), gk));
            }
            Op::Gated(x) => {
                let vx = val(*x);
                let (c2, t) = (vx.shape()[0], vx.shape()[1]);
                let n = c2 / 2 * t;
                let d = vx.data();
                let mut gx = vec![0.0; vx.len()];
                for i in 0..n {
                    let th = d[i].tanh();
                    let sg = sigmoid(d[n + i]);
                    let gv = g.data()[i];
                    gx[i] = gv * sg * (1.0 - th * th);
                    gx[n + i] = gv * th * sg * (1.0 - sg);
                }
                send(*x, Tensor::new(vx.shape(), gx));
            }
            Op::StftMag { x, cfg, saved } => {
                let vx = val(*x);
                let gx = spectral::stft_mag_backward(vx.len(), cfg, saved, g.data());
                send(*x, Tensor::new(vx.shape(), gx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let loss = build(&mut g, v);
        let grads = g.backward(loss);
        let ad = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let fd = numeric_grad(
            |t| {
                let mut g = Graph::new();
                let v = g.leaf(t.clone());
                let l = build(&mut g, v);
                g.value(l).item()
            },
            &x,
        );
        let err = ad.max_abs_diff(&fd);
        assert!(err < 1e-6, "max grad error {err}\nad={ad:?}\nfd={fd:?}");
    }

    fn sample(shape: &[usize], seed: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
    }

    #[test]
    fn grad_unary_chain() {
        check(
            |g, x| {
                let a = g.tanh(x);
                let b = g.sigmoid(a);
                let c = g.softplus(b);
                let d = g.square(c);
                let e = g.leaky_relu(d, 0.2);
                g.mean(e)
            },
            sample(&[3, 4], 0.7),
        );
    }

    #[test]
    fn grad_matmul_all_transposes() {
        // op(A) is [4, 3], op(B) is [3, 5]
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let ashape: [usize; 2] = if ta { [3, 4] } else { [4, 3] };
            let bshape: [usize; 2] = if tb { [5, 3] } else { [3, 5] };
            let b = sample(&bshape, 0.3);
            check(
                move |g, a| {
                    let bv = g.leaf(b.clone());
                    let y = g.matmul_t(a, bv, ta, tb);
                    let y2 = g.square(y);
                    g.sum(y2)
                },
                sample(&ashape, 0.9),
            );
        }
    }

    #[test]
    fn grad_matmul_rhs() {
        let a = sample(&[4, 3], 0.4);
        check(
            move |g, b| {
                let av = g.constant(a.clone());
                let y = g.matmul_t(av, b, false, true);
                let y = g.tanh(y);
                g.sum(y)
            },
            sample(&[5, 3], 0.8),
        );
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        let gamma = sample(&[5], 0.2);
        let beta = sample(&[5], 0.6);
        check(
            move |g, x| {
                let gm = g.constant(gamma.clone());
                let bt = g.constant(beta.clone());
                let y = g.layer_norm(x, gm, bt, 1e-5);
                let s = g.softmax(y);
                let w = g.constant(sample(&[3, 5], 1.3));
                let p = g.mul(s, w);
                g.sum(p)
            },
            sample(&[3, 5], 1.1),
        );
    }

    #[test]
    fn grad_slicing_and_gather() {
        check(
            |g, x| {
                let a = g.slice_cols(x, 1, 3);
                let b = g.slice_rows(x, 0, 2);
                let bt = g.transpose(b);
                let c = g.gather_rows(bt, &[0, 0, 3, 1]);
                let d = g.concat_rows(&[a, c]);
                let e = g.concat_cols(&[d, d]);
                let f = g.square(e);
                g.sum(f)
            },
            sample(&[4, 4], 0.5),
        );
    }

    #[test]
    fn grad_conv_family() {
        let w = sample(&[4, 2, 3], 0.45);
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.conv1d_same(x, wv, 2);
                let z = g.gated(y);
                let z = g.square(z);
                g.sum(z)
            },
            sample(&[2, 9], 0.33),
        );
        check(
            |g, w| {
                let x = g.constant(sample(&[2, 9], 0.33));
                let y = g.conv1d_same(x, w, 3);
                let y = g.tanh(y);
                g.sum(y)
            },
            sample(&[4, 2, 3], 0.45),
        );
        check(
            |g, w| {
                let x = g.constant(sample(&[1, 7, 6], 0.21));
                let y = g.conv2d(x, w, (2, 2), (1, 1));
                let y = g.leaky_relu(y, 0.2);
                let y = g.square(y);
                g.mean(y)
            },
            sample(&[3, 1, 3, 3], 0.61),
        );
        check(
            |g, k| {
                let x = g.constant(sample(&[2, 4], 0.71));
                let y = g.shared_upsample(x, k, 3, 3);
                let y = g.square(y);
                g.sum(y)
            },
            sample(&[9], 0.17),
        );
    }

    #[test]
    fn grad_biases_and_div() {
        check(
            |g, x| {
                let b = g.constant(sample(&[3], 0.2));
                let y = g.add_last_bias(x, b);
                let c = g.constant(sample(&[2], 0.4));
                let z = g.add_first_bias(y, c);
                let s = g.sum(z);
                let q = g.square(z);
                let q = g.sum(q);
                let r = g.div(s, q);
                g.affine(r, 3.0, 1.0)
            },
            sample(&[2, 3], 0.9),
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.mul(c, x);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn detached_branch_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[1], 2.0));
        let y = g.square(x);
        let yd = g.detach(y);
        let z = g.mul(yd, x);
        let l = g.sum(z);
        let grads = g.backward(l);
        // d/dx (stopgrad(x^2) * x) = x^2 = 4
        assert_eq!(grads.get(x).unwrap().item(), 4.0);
    }
}
