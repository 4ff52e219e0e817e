//! Differentiable STFT magnitude (center reflect padding, one-sided spectrum).

use std::sync::Arc;

use rustfft::{num_complex::Complex64, Fft, FftPlanner};

use crate::par;

/// Power floor under the square root; gradients are zero where it is active.
pub const POWER_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct StftConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub win_len: usize,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize, win_len: usize) -> Self {
        assert!(win_len <= n_fft && hop > 0 && n_fft.is_multiple_of(2));
        Self { n_fft, hop, win_len }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    /// Periodic Hann window of `win_len`, zero-padded and centered in `n_fft`.
    pub fn window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win_len) / 2;
        for i in 0..self.win_len {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / self.win_len as f64;
            w[off + i] = 0.5 - 0.5 * phase.cos();
        }
        w
    }
}

#[inline]
fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = j;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

/// Saved state of a forward pass, needed by [`stft_mag_backward`].
#[derive(Clone, Debug)]
pub struct StftSaved {
    pub spectra: Vec<Complex64>,
    pub mag: Vec<f64>,
    pub frames: usize,
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

/// Magnitude spectrogram `[frames, bins]` of a mono signal.
pub fn stft_mag_forward(x: &[f64], cfg: &StftConfig) -> StftSaved {
    let half = cfg.n_fft / 2;
    assert!(x.len() > half, "signal of {} samples too short for n_fft {}", x.len(), cfg.n_fft);
    let frames = cfg.frames(x.len());
    let bins = cfg.bins();
    let win = cfg.window();
    let (fwd, _) = plans(cfg.n_fft);
    let per_frame: Vec<Vec<Complex64>> = par::map_indexed(frames, |f| {
        let mut buf: Vec<Complex64> = (0..cfg.n_fft)
            .map(|n| {
                let src = reflect((f * cfg.hop + n) as isize - half as isize, x.len());
                Complex64::new(x[src] * win[n], 0.0)
            })
            .collect();
        fwd.process(&mut buf);
        buf.truncate(bins);
        buf
    });
    let spectra: Vec<Complex64> = per_frame.into_iter().flatten().collect();
    let mag = spectra.iter().map(|c| c.norm_sqr().max(POWER_FLOOR).sqrt()).collect();
    StftSaved { spectra, mag, frames }
}

/// Gradient w.r.t. the input signal given the gradient w.r.t. the magnitudes.
pub fn stft_mag_backward(len: usize, cfg: &StftConfig, saved: &StftSaved, gmag: &[f64]) -> Vec<f64> {
    let half = cfg.n_fft / 2;
    let bins = cfg.bins();
    let win = cfg.window();
    let (_, inv) = plans(cfg.n_fft);
    let frame_grads: Vec<Vec<f64>> = par::map_indexed(saved.frames, |f| {
        let mut z = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
        for (k, zk) in z.iter_mut().enumerate().take(bins) {
            let idx = f * bins + k;
            let c = saved.spectra[idx];
            if c.norm_sqr() > POWER_FLOOR {
                let s = gmag[idx] / saved.mag[idx];
                *zk = Complex64::new(c.re * s, c.im * s);
            }
        }
        inv.process(&mut z);
        z.iter().zip(&win).map(|(v, w)| v.re * w).collect()
    });
    let mut gx = vec![0.0; len];
    for (f, g) in frame_grads.iter().enumerate() {
        for (n, &v) in g.iter().enumerate() {
            if v != 0.0 {
                gx[reflect((f * cfg.hop + n) as isize - half as isize, len)] += v;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_follows_center_padding() {
        let cfg = StftConfig::new(512, 50, 240);
        assert_eq!(cfg.frames(2400), 49);
        let x: Vec<f64> = (0..2400).map(|i| (i as f64 * 0.05).sin()).collect();
        let s = stft_mag_forward(&x, &cfg);
        assert_eq!(s.mag.len(), 49 * 257);
    }

    #[test]
    fn sine_peaks_at_its_bin() {
        let cfg = StftConfig::new(1024, 256, 1024);
        let sr = 48000.0;
        let bin = 40usize;
        let f = bin as f64 * sr / 1024.0;
        let x: Vec<f64> = (0..8192).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr).sin()).collect();
        let s = stft_mag_forward(&x, &cfg);
        let mid = &s.mag[10 * cfg.bins()..11 * cfg.bins()];
        let argmax = mid.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, bin);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let cfg = StftConfig::new(16, 4, 12);
        let x: Vec<f64> = (0..40).map(|i| ((i * i) as f64 * 0.013).sin()).collect();
        let weights: Vec<f64> = (0..cfg.frames(40) * cfg.bins()).map(|i| (i as f64 * 0.37).cos()).collect();
        let loss = |x: &[f64]| -> f64 { stft_mag_forward(x, &cfg).mag.iter().zip(&weights).map(|(m, w)| m * w).sum() };
        let saved = stft_mag_forward(&x, &cfg);
        let g = stft_mag_backward(x.len(), &cfg, &saved, &weights);
        for i in [0usize, 3, 7, 20, 39] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "i={i} fd={fd} ad={}", g[i]);
        }
    }
}
