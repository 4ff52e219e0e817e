//! Frame-synchronous F0 tracking.

use std::sync::Arc;

use cantus_nn::par;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::mel::{reflect, FrameConfig};
use super::waveform::Waveform;
use crate::error::{Error, Result};

/// Per-frame F0 estimator. Implementations must return one value per
/// analysis frame of `frame` (see [`FrameConfig::n_frames`]), 0 for unvoiced.
pub trait PitchTracker: Send + Sync {
    fn track(&self, w: &Waveform, frame: &FrameConfig) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct YinConfig {
    pub fmin: f64,
    pub fmax: f64,
    /// Cumulative-mean-normalized difference threshold for voicing.
    pub threshold: f64,
    /// Frames with RMS below this are unvoiced.
    pub silence_rms: f64,
    /// Integration window, seconds.
    pub window_s: f64,
}

impl Default for YinConfig {
    fn default() -> Self {
        Self { fmin: 60.0, fmax: 1600.0, threshold: 0.15, silence_rms: 1e-3, window_s: 0.020 }
    }
}

/// YIN difference-function tracker; autocorrelations are computed by FFT.
#[derive(Clone, Debug)]
pub struct YinTracker {
    pub cfg: YinConfig,
}

impl YinTracker {
    pub fn new(cfg: YinConfig) -> Self {
        Self { cfg }
    }
}

impl Default for YinTracker {
    fn default() -> Self {
        Self::new(YinConfig::default())
    }
}

struct YinPlan {
    w: usize,
    tau_min: usize,
    tau_max: usize,
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl YinTracker {
    fn plan(&self, rate: u32) -> Result<YinPlan> {
        let c = &self.cfg;
        let sr = rate as f64;
        if !(c.fmin > 0.0 && c.fmin < c.fmax && c.fmax < sr / 2.0) {
            return Err(Error::Config(format!("pitch range [{}, {}] Hz invalid at {rate} Hz", c.fmin, c.fmax)));
        }
        let tau_min = ((sr / c.fmax).floor() as usize).max(2);
        let tau_max = (sr / c.fmin).ceil() as usize;
        let w = ((c.window_s * sr).round() as usize).max(tau_max);
        let n = (w + tau_max + 1).next_power_of_two() * 2;
        let mut planner = FftPlanner::new();
        Ok(YinPlan { w, tau_min, tau_max, n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) })
    }

    /// F0 of one segment of `w + tau_max + 1` samples.
    fn estimate(&self, p: &YinPlan, seg: &[f64], sr: f64) -> f64 {
        let (w, tmax) = (p.w, p.tau_max);
        let energy: f64 = seg[..w].iter().map(|x| x * x).sum();
        if (energy / w as f64).sqrt() < self.cfg.silence_rms {
            return 0.0;
        }
        // r[tau] = sum_{j<w} x[j] x[j + tau] via cross-correlation of the head with the segment
        let mut a: Vec<Complex64> = (0..p.n).map(|i| Complex64::new(if i < w { seg[i] } else { 0.0 }, 0.0)).collect();
        let mut b: Vec<Complex64> = (0..p.n).map(|i| Complex64::new(if i < seg.len() { seg[i] } else { 0.0 }, 0.0)).collect();
        p.fwd.process(&mut a);
        p.fwd.process(&mut b);
        for (x, y) in a.iter_mut().zip(&b) {
            *x = x.conj() * y;
        }
        p.inv.process(&mut a);
        let scale = 1.0 / p.n as f64;
        // energy of seg[tau..tau + w] by prefix sums
        let mut prefix = vec![0.0; seg.len() + 1];
        for (i, x) in seg.iter().enumerate() {
            prefix[i + 1] = prefix[i] + x * x;
        }
        let mut d = vec![0.0; tmax + 1];
        for (tau, dt) in d.iter_mut().enumerate().skip(1) {
            let e_tau = prefix[tau + w] - prefix[tau];
            *dt = (energy + e_tau - 2.0 * a[tau].re * scale).max(0.0);
        }
        let mut cmnd = vec![1.0; tmax + 1];
        let mut run = 0.0;
        for tau in 1..=tmax {
            run += d[tau];
            cmnd[tau] = if run > 0.0 { d[tau] * tau as f64 / run } else { 1.0 };
        }
        let mut pick = None;
        let mut tau = p.tau_min;
        while tau < tmax {
            if cmnd[tau] < self.cfg.threshold {
                while tau + 1 < tmax && cmnd[tau + 1] < cmnd[tau] {
                    tau += 1;
                }
                pick = Some(tau);
                break;
            }
            tau += 1;
        }
        let Some(t) = pick else { return 0.0 };
        let refined = if t > 1 && t < tmax {
            let (l, c, r) = (cmnd[t - 1], cmnd[t], cmnd[t + 1]);
            let den = l - 2.0 * c + r;
            if den.abs() > 1e-12 {
                t as f64 + (0.5 * (l - r) / den).clamp(-1.0, 1.0)
            } else {
                t as f64
            }
        } else {
            t as f64
        };
        sr / refined
    }
}

impl PitchTracker for YinTracker {
    fn track(&self, w: &Waveform, frame: &FrameConfig) -> Result<Vec<f64>> {
        if w.sample_rate != frame.sample_rate {
            return Err(Error::Frame(format!("waveform rate {} differs from analysis rate {}", w.sample_rate, frame.sample_rate)));
        }
        let p = self.plan(w.sample_rate)?;
        let hop = frame.hop_samples()?;
        let t = frame.n_frames(w.len())?;
        if w.is_empty() {
            return Ok(Vec::new());
        }
        let seg_len = p.w + p.tau_max + 1;
        let n = w.len() as isize;
        let sr = w.sample_rate as f64;
        Ok(par::map_indexed(t, |ti| {
            // integration window centered on the hop midpoint, shifted to stay inside the
            // signal; lags run forward in time unless that would leave the signal, then
            // backward (the difference function is reversal-symmetric)
            let s0 = (ti * hop + hop / 2) as isize - (p.w / 2) as isize;
            let s0 = s0.min(n - p.w as isize).max(0);
            let e0 = s0 + p.w as isize - 1;
            let forward = s0 + seg_len as isize <= n || e0 - (seg_len as isize) < -1;
            let seg: Vec<f64> = (0..seg_len as isize)
                .map(|i| {
                    let j = if forward { s0 + i } else { e0 - i };
                    w.samples[reflect(j, w.len())]
                })
                .collect();
            self.estimate(&p, &seg, sr)
        }))
    }
}

/// F0 track with the default tracker and the default pitch range.
pub fn extract_f0(w: &Waveform, frame: &FrameConfig) -> Result<Vec<f64>> {
    YinTracker::default().track(w, frame)
}
