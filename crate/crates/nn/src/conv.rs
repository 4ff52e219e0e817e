//! Convolution kernels on raw row-major buffers.
//!
//! 1D layouts are channel-first `[channels, time]`; 2D layouts are
//! `[channels, height, width]`. Weights follow the usual
//! `[out, in, taps...]` order.

use crate::linalg::{gemm_into, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> usize {
        let span = self.dilation * (self.kernel - 1);
        (self.len + self.pad_left + self.pad_right).checked_sub(span).expect("conv1d input shorter than the dilated kernel")
    }

    /// Output columns `[t0, t1)` touched by tap `k`, and the input offset for that tap.
    #[inline]
    fn tap_range(&self, k: usize, out_len: usize) -> Option<(usize, usize, isize)> {
        let off = (k * self.dilation) as isize - self.pad_left as isize;
        let t0 = (-off).max(0) as usize;
        let t1 = (out_len as isize).min(self.len as isize - off);
        if t1 <= t0 as isize {
            None
        } else {
            Some((t0, t1 as usize, off))
        }
    }

    fn tap_view<'a>(&self, w: &'a [f64], k: usize) -> MatRef<'a> {
        MatRef { data: w, offset: k, rows: self.c_out, cols: self.c_in, rs: (self.c_in * self.kernel) as isize, cs: self.kernel as isize }
    }
}

pub fn conv1d_forward(x: &[f64], w: &[f64], geom: &Conv1dGeom) -> Vec<f64> {
    let to = geom.out_len();
    let mut out = vec![0.0; geom.c_out * to];
    let xm = MatRef::dense(x, geom.c_in, geom.len);
    for k in 0..geom.kernel {
        if let Some((t0, t1, off)) = geom.tap_range(k, to) {
            let xv = xm.cols_from((t0 as isize + off) as usize, t1 - t0);
            gemm_into(1.0, geom.tap_view(w, k), xv, 1.0, &mut out, t0, to);
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`.
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    geom: &Conv1dGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let to = geom.out_len();
    let (ci, co, kk) = (geom.c_in, geom.c_out, geom.kernel);
    let xm = MatRef::dense(x, ci, geom.len);
    let gm = MatRef::dense(gout, co, to);
    let mut gx = need_x.then(|| vec![0.0; ci * geom.len]);
    // per-tap [k, co, ci] scratch, permuted into [co, ci, k] at the end
    let mut gw_taps = need_w.then(|| vec![0.0; kk * co * ci]);
    for k in 0..kk {
        let Some((t0, t1, off)) = geom.tap_range(k, to) else {
            continue;
        };
        let n = t1 - t0;
        let xs = (t0 as isize + off) as usize;
        let gv = gm.cols_from(t0, n);
        if let Some(gw) = gw_taps.as_mut() {
            gemm_into(1.0, gv, xm.cols_from(xs, n).t(), 1.0, gw, k * co * ci, ci);
        }
        if let Some(gx) = gx.as_mut() {
            gemm_into(1.0, geom.tap_view(w, k).t(), gv, 1.0, gx, xs, geom.len);
        }
    }
    let gw = gw_taps.map(|taps| {
        let mut gw = vec![0.0; co * ci * kk];
        for k in 0..kk {
            for o in 0..co {
                for i in 0..ci {
                    gw[(o * ci + i) * kk + k] = taps[(k * co + o) * ci + i];
                }
            }
        }
        gw
    });
    (gx, gw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1;
        let wo = (self.width + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1;
        (ho, wo)
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel.0 * self.kernel.1
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let (kh, kw) = self.kernel;
        let mut cols = vec![0.0; self.patch() * ho * wo];
        for c in 0..self.c_in {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let y = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let src = &x[(c * self.height + y as usize) * self.width..];
                        for ox in 0..wo {
                            let xx = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            if xx >= 0 && xx < self.width as isize {
                                dst[oy * wo + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (ho, wo) = self.out_hw();
        let (kh, kw) = self.kernel;
        let mut x = vec![0.0; self.c_in * self.height * self.width];
        for c in 0..self.c_in {
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let y = (oy * self.stride.0 + i) as isize - self.pad.0 as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let base = (c * self.height + y as usize) * self.width;
                        for ox in 0..wo {
                            let xx = (ox * self.stride.1 + j) as isize - self.pad.1 as isize;
                            if xx >= 0 && xx < self.width as isize {
                                x[base + xx as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], geom: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = geom.out_hw();
    let cols = geom.im2col(x);
    let mut out = vec![0.0; geom.c_out * ho * wo];
    gemm_into(1.0, MatRef::dense(w, geom.c_out, geom.patch()), MatRef::dense(&cols, geom.patch(), ho * wo), 0.0, &mut out, 0, ho * wo);
    out
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    geom: &Conv2dGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = geom.out_hw();
    let p = geom.patch();
    let gm = MatRef::dense(gout, geom.c_out, ho * wo);
    let gw = need_w.then(|| {
        let cols = geom.im2col(x);
        let mut gw = vec![0.0; geom.c_out * p];
        gemm_into(1.0, gm, MatRef::dense(&cols, p, ho * wo).t(), 0.0, &mut gw, 0, p);
        gw
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![0.0; p * ho * wo];
        gemm_into(1.0, MatRef::dense(w, geom.c_out, p).t(), gm, 0.0, &mut gcols, 0, ho * wo);
        geom.col2im(&gcols)
    });
    (gx, gw)
}

/// Transposed 1D convolution with a single kernel shared by every channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SharedUpsampleGeom {
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl SharedUpsampleGeom {
    pub fn out_len(&self) -> usize {
        ((self.len - 1) * self.stride + self.kernel).checked_sub(2 * self.pad).expect("padding exceeds transposed-conv output")
    }
}

pub fn conv_transpose_shared_forward(x: &[f64], k: &[f64], g: &SharedUpsampleGeom) -> Vec<f64> {
    let lo = g.out_len();
    let mut out = vec![0.0; g.channels * lo];
    for c in 0..g.channels {
        let xr = &x[c * g.len..(c + 1) * g.len];
        let or = &mut out[c * lo..(c + 1) * lo];
        for (i, &xv) in xr.iter().enumerate() {
            let base = (i * g.stride) as isize - g.pad as isize;
            for (j, &kv) in k.iter().enumerate() {
                let o = base + j as isize;
                if o >= 0 && (o as usize) < lo {
                    or[o as usize] += xv * kv;
                }
            }
        }
    }
    out
}

pub fn conv_transpose_shared_backward(x: &[f64], k: &[f64], gout: &[f64], g: &SharedUpsampleGeom) -> (Vec<f64>, Vec<f64>) {
    let lo = g.out_len();
    let mut gx = vec![0.0; g.channels * g.len];
    let mut gk = vec![0.0; k.len()];
    for c in 0..g.channels {
        let xr = &x[c * g.len..(c + 1) * g.len];
        let gr = &gout[c * lo..(c + 1) * lo];
        for (i, &xv) in xr.iter().enumerate() {
            let base = (i * g.stride) as isize - g.pad as isize;
            let mut acc = 0.0;
            for (j, &kv) in k.iter().enumerate() {
                let o = base + j as isize;
                if o >= 0 && (o as usize) < lo {
                    let gv = gr[o as usize];
                    acc += gv * kv;
                    gk[j] += gv * xv;
                }
            }
            gx[c * g.len + i] = acc;
        }
    }
    (gx, gk)
}
