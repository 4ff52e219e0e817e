//! Log-mel spectrogram with center-aligned reflect-padded framing.
//!
//! Frame `t` is centered on the midpoint of hop `t`, i.e. sample
//! `t * hop + (hop - 1) / 2`, so a signal of `len` samples yields
//! `ceil(len / hop)` frames and reversing a hop-aligned signal reverses the
//! frame sequence exactly.

use std::sync::Arc;

use cantus_nn::par;
use cantus_nn::Tensor;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::waveform::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// Floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-5;

/// Analysis framing shared by every per-frame feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub sample_rate: u32,
    pub hop_s: f64,
    pub window_s: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { sample_rate: DEFAULT_SAMPLE_RATE, hop_s: 0.005, window_s: 0.020 }
    }
}

fn exact_samples(seconds: f64, rate: u32, what: &'static str) -> Result<usize> {
    let x = seconds * rate as f64;
    let n = x.round();
    if seconds.is_nan() || seconds <= 0.0 || (x - n).abs() > 1e-6 || n < 1.0 {
        return Err(Error::Config(format!("{what} of {seconds} s is not a whole number of samples at {rate} Hz")));
    }
    Ok(n as usize)
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        let hop = self.hop_samples()?;
        let win = self.window_samples()?;
        if win < hop {
            return Err(Error::Config(format!("window ({win}) shorter than hop ({hop})")));
        }
        Ok(())
    }

    pub fn hop_samples(&self) -> Result<usize> {
        exact_samples(self.hop_s, self.sample_rate, "hop")
    }

    pub fn window_samples(&self) -> Result<usize> {
        exact_samples(self.window_s, self.sample_rate, "window")
    }

    /// Power-of-two FFT size holding one window.
    pub fn n_fft(&self) -> Result<usize> {
        Ok(self.window_samples()?.next_power_of_two())
    }

    /// `ceil(len / hop)`.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        Ok(len.div_ceil(self.hop_samples()?))
    }
}

#[inline]
pub(crate) fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = j;
    // repeated reflection keeps very short signals valid
    loop {
        if j < 0 {
            j = -j;
        } else if j >= n {
            j = 2 * (n - 1) - j;
        } else {
            return j as usize;
        }
    }
}

/// Copies the `n_fft` samples of frame `t` into `out`, reflect-padded.
///
/// The `win` window occupies `out[(n_fft - win) / 2..][..win]` and its
/// midpoint is aligned with the hop midpoint.
pub(crate) fn frame_into(x: &[f64], t: usize, hop: usize, win: usize, n_fft: usize, out: &mut [f64]) {
    let off = (n_fft - win) / 2;
    // window start so that (start + (win - 1) / 2) == t * hop + (hop - 1) / 2, in half-samples
    let start2 = (2 * t * hop + hop - 1) as isize - (win as isize - 1);
    debug_assert!(start2 % 2 == 0, "hop and window parity must match");
    let start = start2 / 2 - off as isize;
    for (i, o) in out.iter_mut().enumerate() {
        *o = x[reflect(start + i as isize, x.len())];
    }
}

/// Symmetric Hann window of `win` samples centered in `n_fft`.
pub fn centered_hann(win: usize, n_fft: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_fft];
    let off = (n_fft - win) / 2;
    let denom = (win - 1).max(1) as f64;
    for i in 0..win {
        w[off + i] = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos();
    }
    w
}

/// Slaney-style mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Triangular, area-normalized mel filterbank.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`
    pub weights: Tensor,
    /// Peak frequency of every filter, Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let nyq = sample_rate as f64 / 2.0;
        if n_mels == 0 || !(0.0..fmax).contains(&fmin) || fmax > nyq {
            return Err(Error::Config(format!("bad mel filterbank: {n_mels} mels over [{fmin}, {fmax}] Hz at {sample_rate} Hz")));
        }
        let bins = n_fft / 2 + 1;
        let (m0, m1) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let pts: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(m0 + (m1 - m0) * i as f64 / (n_mels + 1) as f64)).collect();
        let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
        let mut w = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            let norm = 2.0 / (hi - lo);
            for k in 0..bins {
                let f = bin_hz(k);
                let up = (f - lo) / (c - lo);
                let down = (hi - f) / (hi - c);
                w[m * bins + k] = up.min(down).max(0.0) * norm;
            }
        }
        Ok(Self { weights: Tensor::new(&[n_mels, bins], w), centers_hz: pts[1..=n_mels].to_vec() })
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub frame: FrameConfig,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { frame: FrameConfig::default(), n_mels: 80, fmin: 0.0, fmax: DEFAULT_SAMPLE_RATE as f64 / 2.0 }
    }
}

/// Reusable log-mel analyzer (filterbank, window and FFT plan).
pub struct MelExtractor {
    pub cfg: MelConfig,
    pub filterbank: MelFilterbank,
    hop: usize,
    win: usize,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.frame.validate()?;
        let hop = cfg.frame.hop_samples()?;
        let win = cfg.frame.window_samples()?;
        if (win - hop) % 2 != 0 {
            return Err(Error::Config(format!("window ({win}) and hop ({hop}) sample counts must have equal parity")));
        }
        let n_fft = cfg.frame.n_fft()?;
        let filterbank = MelFilterbank::new(cfg.frame.sample_rate, n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)?;
        Ok(Self { cfg, filterbank, hop, win, n_fft, window: centered_hann(win, n_fft), fft: FftPlanner::new().plan_fft_forward(n_fft) })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Mel energies (linear amplitude) `[T, n_mels]`.
    pub fn mel_energies(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate != self.cfg.frame.sample_rate {
            return Err(Error::Frame(format!("waveform rate {} differs from analysis rate {}", w.sample_rate, self.cfg.frame.sample_rate)));
        }
        if w.len() <= self.win {
            return Err(Error::Frame(format!("waveform of {} samples is not longer than one {}-sample window", w.len(), self.win)));
        }
        let t = w.len().div_ceil(self.hop);
        let bins = self.n_fft / 2 + 1;
        let n_mels = self.cfg.n_mels;
        let fb = self.filterbank.weights.data();
        let rows = par::map_indexed(t, |ti| {
            let mut frame = vec![0.0; self.n_fft];
            frame_into(&w.samples, ti, self.hop, self.win, self.n_fft, &mut frame);
            let mut buf: Vec<Complex64> = frame.iter().zip(&self.window).map(|(x, h)| Complex64::new(x * h, 0.0)).collect();
            self.fft.process(&mut buf);
            let mag: Vec<f64> = buf[..bins].iter().map(|c| c.norm()).collect();
            (0..n_mels).map(|m| fb[m * bins..(m + 1) * bins].iter().zip(&mag).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>()
        });
        Ok(Tensor::new(&[t, n_mels], rows.concat()))
    }

    /// Natural-log mel spectrogram `[T, n_mels]`, floored at [`LOG_FLOOR`].
    pub fn log_mel(&self, w: &Waveform) -> Result<Tensor> {
        Ok(self.mel_energies(w)?.map(|e| e.max(LOG_FLOOR).ln()))
    }
}

/// One-shot log-mel extraction.
pub fn mel_spectrogram(w: &Waveform, cfg: MelConfig) -> Result<Tensor> {
    MelExtractor::new(cfg)?.log_mel(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(hz: f64, secs: f64) -> Waveform {
        let n = (secs * 48_000.0) as usize;
        let s = (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 48_000.0).sin()).collect();
        Waveform::new(s, 48_000).unwrap()
    }

    #[test]
    fn frame_count_is_ceil_len_over_hop() {
        let m = mel_spectrogram(&sine(440.0, 1.0), MelConfig::default()).unwrap();
        assert_eq!(m.shape(), &[200, 80]);
        let w = Waveform::new(vec![0.1; 48_001], 48_000).unwrap();
        assert_eq!(mel_spectrogram(&w, MelConfig::default()).unwrap().rows(), 201);
    }

    #[test]
    fn silence_hits_floor() {
        let w = Waveform::new(vec![0.0; 4800], 48_000).unwrap();
        let m = mel_spectrogram(&w, MelConfig::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short_is_frame_error() {
        let w = Waveform::new(vec![0.0; 960], 48_000).unwrap();
        assert!(matches!(mel_spectrogram(&w, MelConfig::default()), Err(Error::Frame(_))));
    }

    #[test]
    fn tone_peaks_at_nearest_center() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        for hz in [1000.0, 3000.0] {
            let m = ex.log_mel(&sine(hz, 0.25)).unwrap();
            let row = m.row(25);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            let nearest = (0..80)
                .min_by(|&a, &b| (ex.filterbank.centers_hz[a] - hz).abs().total_cmp(&(ex.filterbank.centers_hz[b] - hz).abs()))
                .unwrap();
            assert_eq!(argmax, nearest, "{hz} Hz");
        }
    }

    #[test]
    fn framing_centers_on_hop_midpoints() {
        // an impulse at sample s lands at the window peak of the frame whose hop contains s
        let hop = 240;
        let mut frame = vec![0.0; 1024];
        let x: Vec<f64> = (0..4800).map(|i| i as f64).collect();
        frame_into(&x, 5, hop, 960, 1024, &mut frame);
        let center = (frame[511] + frame[512]) / 2.0;
        assert_eq!(center, 5.0 * 240.0 + 119.5);
    }

    #[test]
    fn reversal_preserves_bin_energy() {
        let n = 24_000;
        let s: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / 48_000.0;
                (2.0 * std::f64::consts::PI * 300.0 * t * (1.0 + t)).sin() * (1.0 - t)
            })
            .collect();
        let w = Waveform::new(s, 48_000).unwrap();
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        let a = ex.mel_energies(&w).unwrap();
        let b = ex.mel_energies(&w.reversed()).unwrap();
        for m in 0..80 {
            let (sa, sb): (f64, f64) =
                (0..a.rows()).map(|t| (a.at2(t, m), b.at2(t, m))).fold((0.0, 0.0), |acc, (x, y)| (acc.0 + x, acc.1 + y));
            assert!((sa - sb).abs() <= 1e-4 * sa.abs().max(1e-12), "bin {m}: {sa} vs {sb}");
        }
    }

    #[test]
    fn mel_scale_roundtrip() {
        for hz in [0.0, 100.0, 999.0, 1000.0, 5000.0, 24_000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }
}
