//! Parallel waveform generator: non-causal gated dilated convolutions over a
//! noise input, conditioned on frame features upsampled to the sample rate.

use cantus_nn::layers::Conv1d;
use cantus_nn::spectral::{stft_mag_forward, StftConfig};
use cantus_nn::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{AcousticFeatures, NormStats, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    pub n_stacks: usize,
    /// Dilations `1, 2, 4, ..` doubling within each stack.
    pub n_layers_per_stack: usize,
    pub kernel: usize,
    pub residual_channels: usize,
    pub gate_channels: usize,
    pub skip_channels: usize,
    /// Mel bins + F0 + V/UV.
    pub aux_dims: usize,
    pub hop_samples: usize,
    pub upsample_factors: Vec<usize>,
    pub sample_rate: u32,
    /// Adds a sine channel at the conditioning F0 beside the noise input.
    pub sine_excitation: bool,
}

impl VocoderConfig {
    pub fn full() -> Self {
        Self {
            n_stacks: 3,
            n_layers_per_stack: 10,
            kernel: 13,
            residual_channels: 64,
            gate_channels: 128,
            skip_channels: 64,
            aux_dims: 82,
            hop_samples: 240,
            upsample_factors: vec![4, 4, 15],
            sample_rate: 48_000,
            sine_excitation: false,
        }
    }

    pub fn tiny() -> Self {
        Self {
            n_stacks: 2,
            n_layers_per_stack: 6,
            residual_channels: 8,
            gate_channels: 16,
            skip_channels: 8,
            sine_excitation: true,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_stacks == 0 || self.n_layers_per_stack == 0 {
            return bad("vocoder needs at least one layer".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if !self.gate_channels.is_multiple_of(2) || self.residual_channels == 0 || self.skip_channels == 0 {
            return bad("gate channels must be even and channel counts positive".into());
        }
        if self.aux_dims < 2 {
            return bad("aux needs at least F0 and V/UV columns".into());
        }
        if self.upsample_factors.contains(&0) || self.upsample_factors.iter().product::<usize>() != self.hop_samples {
            return bad(format!("upsample factors {:?} must multiply to hop {}", self.upsample_factors, self.hop_samples));
        }
        if self.n_layers_per_stack > 30 {
            return bad("dilation would overflow".into());
        }
        Ok(())
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.n_layers_per_stack).map(|i| 1 << i).collect()
    }

    /// `1 + stacks * (kernel - 1) * sum(dilations)` samples.
    pub fn receptive_field(&self) -> usize {
        1 + self.n_stacks * (self.kernel - 1) * self.dilations().iter().sum::<usize>()
    }

    pub fn input_channels(&self) -> usize {
        1 + self.sine_excitation as usize
    }
}

/// Per-frame vocoder input: normalized mel, normalized voiced F0 (0 when
/// unvoiced) and the V/UV flag, plus F0 in Hz for the sine source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningFeatures {
    /// `[T, aux_dims]`
    pub frames: Tensor,
    pub f0_hz: Vec<f64>,
}

impl ConditioningFeatures {
    pub fn from_features(feat: &AcousticFeatures, stats: &NormStats) -> Result<Self> {
        let n = stats.normalize(feat)?;
        let (t, m) = (n.n_frames(), n.n_mels());
        let frames = Tensor::from_fn(&[t, m + 2], |i| {
            let (r, c) = (i / (m + 2), i % (m + 2));
            match c {
                c if c < m => n.mel.at2(r, c),
                c if c == m => n.f0[r],
                _ => n.vuv[r],
            }
        });
        let f0_hz = (0..t).map(|i| if feat.vuv[i] == 1.0 { feat.f0[i] } else { 0.0 }).collect();
        Ok(Self { frames, f0_hz })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn validate(&self, aux_dims: usize) -> Result<()> {
        let t = self.n_frames();
        if t == 0 || self.frames.ndim() != 2 || self.frames.cols() != aux_dims {
            return Err(Error::Contract(format!("conditioning is {:?}, expected [T >= 1, {aux_dims}]", self.frames.shape())));
        }
        if self.f0_hz.len() != t {
            return Err(Error::Contract("F0 track length differs from frame count".into()));
        }
        if (0..t).any(|r| !matches!(self.frames.at2(r, aux_dims - 1), 0.0 | 1.0)) {
            return Err(Error::Contract("V/UV column must be 0 or 1".into()));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self { frames: self.frames.slice_rows(start, end), f0_hz: self.f0_hz[start..end].to_vec() }
    }
}

/// Frame `i` of `col` repeated over samples `[hop*i, hop*(i+1))`.
pub fn repeat_frames(col: &[f64], hop: usize) -> Vec<f64> {
    col.iter().flat_map(|&v| std::iter::repeat_n(v, hop)).collect()
}

/// Unit sine following the F0 track; phase holds through unvoiced frames.
pub fn sine_source(f0_hz: &[f64], hop: usize, sample_rate: u32) -> Vec<f64> {
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(f0_hz.len() * hop);
    for &f in f0_hz {
        for _ in 0..hop {
            if f > 0.0 {
                out.push(phase.sin());
                phase = (phase + std::f64::consts::TAU * f / sample_rate as f64) % std::f64::consts::TAU;
            } else {
                out.push(0.0);
            }
        }
    }
    out
}

pub fn standard_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResidualLayer {
    dil: Conv1d,
    aux: Conv1d,
    res: Conv1d,
    skip: Conv1d,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layers {
    upsample: Vec<ParamId>,
    input: Conv1d,
    blocks: Vec<ResidualLayer>,
    post1: Conv1d,
    post2: Conv1d,
}

pub struct Vocoder {
    pub cfg: VocoderConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Frames of extra context around a slice so the learned upsampler sees
/// the same neighbours as on the full sequence.
const UPSAMPLE_CONTEXT: usize = 2;

impl Vocoder {
    pub fn new(cfg: VocoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let upsample = cfg
            .upsample_factors
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                // Nearest-neighbour start: ones on taps [f, 2f) of a 3f kernel.
                let k = Tensor::from_fn(&[3 * f], |j| if (f..2 * f).contains(&j) { 1.0 } else { 0.0 });
                s.add(format!("upsample{i}"), k)
            })
            .collect();
        let (r, gc, sk) = (cfg.residual_channels, cfg.gate_channels, cfg.skip_channels);
        let input = Conv1d::new(&mut s, "input", cfg.input_channels(), r, 1, 1, true, &mut rng);
        let mut blocks = Vec::new();
        for st in 0..cfg.n_stacks {
            for (l, d) in cfg.dilations().into_iter().enumerate() {
                let n = format!("stack{st}.layer{l}");
                blocks.push(ResidualLayer {
                    dil: Conv1d::new(&mut s, &format!("{n}.dil"), r, gc, cfg.kernel, d, true, &mut rng),
                    aux: Conv1d::new(&mut s, &format!("{n}.aux"), cfg.aux_dims, gc, 1, 1, false, &mut rng),
                    res: Conv1d::new(&mut s, &format!("{n}.res"), gc / 2, r, 1, 1, true, &mut rng),
                    skip: Conv1d::new(&mut s, &format!("{n}.skip"), gc / 2, sk, 1, 1, true, &mut rng),
                });
            }
        }
        let post1 = Conv1d::new(&mut s, "post1", sk, sk, 1, 1, true, &mut rng);
        let post2 = Conv1d::new(&mut s, "post2", sk, 1, 1, 1, true, &mut rng);
        Ok(Self { cfg, params: s, layers: Layers { upsample, input, blocks, post1, post2 } })
    }

    /// Upsampled conditioning `[aux_dims, n_frames * hop]` for frames
    /// `[start, start + n_frames)` of `cond`.
    pub fn upsample(&self, g: &mut Graph, p: &Bound, cond: &ConditioningFeatures, start: usize, n_frames: usize) -> Result<Var> {
        cond.validate(self.cfg.aux_dims)?;
        let t = cond.n_frames();
        if n_frames == 0 || start + n_frames > t {
            return Err(Error::Contract(format!("frames [{start}, {}) outside 0..{t}", start + n_frames)));
        }
        let hop = self.cfg.hop_samples;
        let a = start.saturating_sub(UPSAMPLE_CONTEXT);
        let b = (start + n_frames + UPSAMPLE_CONTEXT).min(t);
        let ctx = cond.frames.slice_rows(a, b);
        let c = self.cfg.aux_dims - 1;
        let cont = g.constant(ctx.slice_cols(0, c).transpose2());
        let mut x = cont;
        for (&k, &f) in self.layers.upsample.iter().zip(&self.cfg.upsample_factors) {
            x = g.shared_upsample(x, p[k], f, f);
        }
        let off = (start - a) * hop;
        let x = g.slice_cols(x, off, off + n_frames * hop);
        let vuv_col: Vec<f64> = (start..start + n_frames).map(|r| cond.frames.at2(r, c)).collect();
        let vuv = g.constant(Tensor::new(&[1, n_frames * hop], repeat_frames(&vuv_col, hop)));
        Ok(g.concat_rows(&[x, vuv]))
    }

    /// Network input `[input_channels, n_frames * hop]`: noise, then the sine source.
    pub fn source(&self, cond: &ConditioningFeatures, start: usize, n_frames: usize, noise: &[f64]) -> Result<Tensor> {
        let len = n_frames * self.cfg.hop_samples;
        if noise.len() != len {
            return Err(Error::Contract(format!("{} noise samples for {len} output samples", noise.len())));
        }
        let mut data = noise.to_vec();
        if self.cfg.sine_excitation {
            let hop = self.cfg.hop_samples;
            let full = sine_source(&cond.f0_hz[..start + n_frames], hop, self.cfg.sample_rate);
            data.extend_from_slice(&full[start * hop..]);
        }
        Ok(Tensor::new(&[self.cfg.input_channels(), len], data))
    }

    /// `source: [input_channels, L]`, `aux: [aux_dims, L]` -> waveform `[L]` in (-1, 1).
    pub fn forward(&self, g: &mut Graph, p: &Bound, source: Var, aux: Var) -> Result<Var> {
        let (ss, sa) = (g.shape(source).to_vec(), g.shape(aux).to_vec());
        if ss.len() != 2 || sa.len() != 2 || ss[1] != sa[1] || ss[0] != self.cfg.input_channels() || sa[0] != self.cfg.aux_dims {
            return Err(Error::Contract(format!("source {ss:?} and conditioning {sa:?} do not line up")));
        }
        let l = &self.layers;
        let mut x = l.input.forward(g, p, source);
        let mut skips = Vec::with_capacity(l.blocks.len());
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for b in &l.blocks {
            let h = b.dil.forward(g, p, x);
            let c = b.aux.forward(g, p, aux);
            let h = g.add(h, c);
            let z = g.gated(h);
            skips.push(b.skip.forward(g, p, z));
            let r = b.res.forward(g, p, z);
            let s = g.add(x, r);
            x = g.scale(s, half);
        }
        let s = g.add_all(&skips);
        let s = g.scale(s, (1.0 / skips.len() as f64).sqrt());
        let s = g.relu(s);
        let s = l.post1.forward(g, p, s);
        let s = g.relu(s);
        let y = l.post2.forward(g, p, s);
        let y = g.tanh(y);
        let n = ss[1];
        Ok(g.reshape(y, &[n]))
    }

    /// Waveform for `cond` given explicit noise of `T * hop` samples.
    ///
    /// Runs in overlapping chunks whose context covers the receptive field,
    /// so the result matches a single full-length pass.
    pub fn generate_with_noise(&self, cond: &ConditioningFeatures, noise: &[f64]) -> Result<Waveform> {
        cond.validate(self.cfg.aux_dims)?;
        let hop = self.cfg.hop_samples;
        let t = cond.n_frames();
        if noise.len() != t * hop {
            return Err(Error::Contract(format!("{} noise samples for {} output samples", noise.len(), t * hop)));
        }
        let ctx = (self.cfg.receptive_field() / 2).div_ceil(hop) + 1;
        let chunk = 100usize;
        let mut out = Vec::with_capacity(t * hop);
        let mut s = 0;
        while s < t {
            let e = (s + chunk).min(t);
            let (a, b) = (s.saturating_sub(ctx), (e + ctx).min(t));
            let mut g = Graph::new();
            let p = self.params.bind_frozen(&mut g);
            let aux = self.upsample(&mut g, &p, cond, a, b - a)?;
            let src = self.source(cond, a, b - a, &noise[a * hop..b * hop])?;
            let src = g.constant(src);
            let y = self.forward(&mut g, &p, src, aux)?;
            out.extend_from_slice(&g.value(y).data()[(s - a) * hop..(e - a) * hop]);
            s = e;
        }
        Waveform::new(out, self.cfg.sample_rate)
    }

    pub fn generate<R: Rng + ?Sized>(&self, cond: &ConditioningFeatures, rng: &mut R) -> Result<Waveform> {
        let noise = standard_noise(cond.n_frames() * self.cfg.hop_samples, rng);
        self.generate_with_noise(cond, &noise)
    }

    /// Mirrors every convolution kernel in time, making the network
    /// equivariant to time reversal.
    pub fn symmetrize(&mut self) {
        for t in self.params.values_mut() {
            if t.ndim() == 3 || t.ndim() == 1 && t.len() > 1 {
                let k = *t.shape().last().unwrap();
                let d = t.data_mut();
                for row in d.chunks_mut(k) {
                    for j in 0..k / 2 {
                        let m = 0.5 * (row[j] + row[k - 1 - j]);
                        row[j] = m;
                        row[k - 1 - j] = m;
                    }
                }
            }
        }
    }
}

/// (1024/120/600), (2048/240/1200), (512/50/240) at 48 kHz.
pub fn default_resolutions() -> Vec<StftConfig> {
    vec![StftConfig::new(1024, 120, 600), StftConfig::new(2048, 240, 1200), StftConfig::new(512, 50, 240)]
}

fn check_lengths(pred: usize, target: usize, res: &[StftConfig]) -> Result<()> {
    if pred != target {
        return Err(Error::Contract(format!("prediction has {pred} samples, target {target}")));
    }
    if res.is_empty() {
        return Err(Error::Contract("no STFT resolutions".into()));
    }
    if let Some(r) = res.iter().find(|r| target <= r.n_fft / 2) {
        return Err(Error::Contract(format!("{target} samples too short for n_fft {}", r.n_fft)));
    }
    Ok(())
}

/// Mean over resolutions of spectral convergence plus mean absolute
/// log-magnitude difference.
pub fn multires_stft_loss(g: &mut Graph, pred: Var, target: &[f64], res: &[StftConfig]) -> Result<Var> {
    check_lengths(g.shape(pred)[0], target.len(), res)?;
    let mut terms = Vec::with_capacity(res.len());
    for r in res {
        let tm = stft_mag_forward(target, r);
        let norm = tm.mag.iter().map(|m| m * m).sum::<f64>().sqrt();
        let shape = [tm.frames, r.bins()];
        let log_t = g.constant(Tensor::new(&shape, tm.mag.iter().map(|m| m.ln()).collect()));
        let mag_t = g.constant(Tensor::new(&shape, tm.mag));
        let mp = g.stft_mag(pred, r);
        let d = g.sub(mp, mag_t);
        let d = g.square(d);
        let d = g.sum(d);
        let d = g.sqrt(d);
        let sc = g.scale(d, 1.0 / norm);
        let lp = g.log(mp);
        let ld = g.sub(lp, log_t);
        let ld = g.abs(ld);
        let lm = g.mean(ld);
        terms.push(g.add(sc, lm));
    }
    let s = g.add_all(&terms);
    Ok(g.scale(s, 1.0 / res.len() as f64))
}

/// Value-only form of [`multires_stft_loss`].
pub fn multires_stft_loss_value(pred: &[f64], target: &[f64], res: &[StftConfig]) -> Result<f64> {
    check_lengths(pred.len(), target.len(), res)?;
    let mut total = 0.0;
    for r in res {
        let (p, t) = (stft_mag_forward(pred, r).mag, stft_mag_forward(target, r).mag);
        let num: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = t.iter().map(|b| b * b).sum();
        let lm = p.iter().zip(&t).map(|(a, b)| (a.ln() - b.ln()).abs()).sum::<f64>() / p.len() as f64;
        total += (num / den).sqrt() + lm;
    }
    Ok(total / res.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(sine: bool) -> VocoderConfig {
        VocoderConfig {
            n_stacks: 1,
            n_layers_per_stack: 3,
            kernel: 5,
            residual_channels: 4,
            gate_channels: 8,
            skip_channels: 4,
            aux_dims: 6,
            sine_excitation: sine,
            ..VocoderConfig::full()
        }
    }

    fn cond(t: usize, aux: usize, seed: u64) -> ConditioningFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::from_fn(&[t, aux], |i| {
            if i % aux == aux - 1 {
                !(i / aux).is_multiple_of(3) as u8 as f64
            } else {
                rng.sample::<f64, _>(StandardNormal)
            }
        });
        let f0_hz = (0..t).map(|r| if frames.at2(r, aux - 1) == 1.0 { 200.0 + r as f64 } else { 0.0 }).collect();
        ConditioningFeatures { frames, f0_hz }
    }

    #[test]
    fn receptive_field_formula() {
        assert_eq!(VocoderConfig::full().receptive_field(), 36829);
        let k9 = VocoderConfig { kernel: 9, ..VocoderConfig::full() };
        assert_eq!(k9.receptive_field(), 24553);
        let one = VocoderConfig { n_stacks: 1, n_layers_per_stack: 1, kernel: 3, ..VocoderConfig::full() };
        assert_eq!(one.receptive_field(), 3);
        assert_eq!(VocoderConfig::full().dilations().last(), Some(&512));
    }

    #[test]
    fn config_validation() {
        VocoderConfig::full().validate().unwrap();
        VocoderConfig::tiny().validate().unwrap();
        let mut c = VocoderConfig::full();
        c.kernel = 12;
        assert!(c.validate().is_err());
        let mut c = VocoderConfig::full();
        c.upsample_factors = vec![4, 4, 16];
        assert!(c.validate().is_err());
    }

    #[test]
    fn upsampled_length_and_vuv_repetition() {
        let v = Vocoder::new(small_cfg(false), 0).unwrap();
        let c = cond(10, 6, 1);
        let mut g = Graph::new();
        let p = v.params.bind_frozen(&mut g);
        let up = v.upsample(&mut g, &p, &c, 0, 10).unwrap();
        assert_eq!(g.shape(up), &[6, 2400]);
        let val = g.value(up);
        for i in 0..10 {
            let want = c.frames.at2(i, 5);
            assert!(val.row(5)[240 * i..240 * (i + 1)].iter().all(|&x| x == want));
        }
    }

    #[test]
    fn nearest_init_repeats_constant_frames() {
        let v = Vocoder::new(small_cfg(false), 0).unwrap();
        let c = ConditioningFeatures { frames: Tensor::from_fn(&[4, 6], |i| if i % 6 == 5 { 1.0 } else { 0.3 }), f0_hz: vec![100.0; 4] };
        let mut g = Graph::new();
        let p = v.params.bind_frozen(&mut g);
        let up = v.upsample(&mut g, &p, &c, 0, 4).unwrap();
        assert!(g.value(up).data().iter().all(|&x| (x - 0.3).abs() < 1e-12 || x == 1.0));
    }

    #[test]
    fn slice_upsampling_matches_full() {
        let v = Vocoder::new(small_cfg(false), 0).unwrap();
        let mut v2 = Vocoder::new(small_cfg(false), 0).unwrap();
        for t in v2.params.values_mut() {
            if t.ndim() == 1 && t.len() > 8 {
                *t = t.map(|x| x * 0.5 + 0.1);
            }
        }
        for m in [&v, &v2] {
            let c = cond(12, 6, 2);
            let mut g = Graph::new();
            let p = m.params.bind_frozen(&mut g);
            let full = m.upsample(&mut g, &p, &c, 0, 12).unwrap();
            let part = m.upsample(&mut g, &p, &c, 4, 5).unwrap();
            let want = g.value(full).slice_cols(4 * 240, 9 * 240);
            assert!(g.value(part).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn output_length_is_frames_times_hop() {
        let v = Vocoder::new(small_cfg(true), 3).unwrap();
        for t in [1, 2, 7] {
            let c = cond(t, 6, t as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let w = v.generate(&c, &mut rng).unwrap();
            assert_eq!(w.len(), t * 240);
            assert!(w.samples.iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn deterministic_and_chunking_exact() {
        let v = Vocoder::new(small_cfg(true), 3).unwrap();
        let c = cond(230, 6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = standard_noise(230 * 240, &mut rng);
        let a = v.generate_with_noise(&c, &noise).unwrap();
        let b = v.generate_with_noise(&c, &noise).unwrap();
        assert_eq!(a, b);
        let mut g = Graph::new();
        let p = v.params.bind_frozen(&mut g);
        let aux = v.upsample(&mut g, &p, &c, 0, 230).unwrap();
        let src = g.constant(v.source(&c, 0, 230, &noise).unwrap());
        let y = v.forward(&mut g, &p, src, aux).unwrap();
        let full = g.value(y).data();
        let err = full.iter().zip(&a.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "chunked vs full {err}");
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let v = Vocoder::new(small_cfg(false), 0).unwrap();
        let c = cond(3, 6, 0);
        assert!(matches!(v.generate_with_noise(&c, &[0.0; 10]), Err(Error::Contract(_))));
        let mut g = Graph::new();
        let p = v.params.bind_frozen(&mut g);
        let src = g.constant(Tensor::zeros(&[1, 100]));
        let aux = g.constant(Tensor::zeros(&[6, 99]));
        assert!(matches!(v.forward(&mut g, &p, src, aux), Err(Error::Contract(_))));
    }

    #[test]
    fn time_reversal_symmetry() {
        let mut v = Vocoder::new(small_cfg(false), 5).unwrap();
        v.symmetrize();
        let c = cond(6, 6, 4);
        let rc = ConditioningFeatures {
            frames: Tensor::from_rows(&(0..6).rev().map(|r| c.frames.row(r).to_vec()).collect::<Vec<_>>()),
            f0_hz: c.f0_hz.iter().rev().copied().collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = standard_noise(6 * 240, &mut rng);
        let rnoise: Vec<f64> = noise.iter().rev().copied().collect();
        let a = v.generate_with_noise(&c, &noise).unwrap();
        let b = v.generate_with_noise(&rc, &rnoise).unwrap();
        let err = a.reversed().samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sine_source_phase_continuity() {
        let s = sine_source(&[480.0, 0.0, 480.0], 100, 48000);
        assert_eq!(s.len(), 300);
        assert!(s[100..200].iter().all(|&x| x == 0.0));
        assert!((s[1] - (std::f64::consts::TAU / 100.0).sin()).abs() < 1e-12);
        // Phase resumes where it stopped: 100 samples at 480 Hz is exactly one cycle.
        assert!((s[201] - s[1]).abs() < 1e-9);
    }

    #[test]
    fn stft_loss_oracles() {
        let res = default_resolutions();
        let n = 4800;
        let sine: Vec<f64> = (0..n).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
        assert_eq!(multires_stft_loss_value(&sine, &sine, &res).unwrap(), 0.0);
        let neg: Vec<f64> = sine.iter().map(|x| -x).collect();
        assert!(multires_stft_loss_value(&neg, &sine, &res).unwrap() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise: Vec<f64> = standard_noise(n, &mut rng).iter().map(|x| x * 0.5 / 2f64.sqrt()).collect();
        assert!(multires_stft_loss_value(&noise, &sine, &res).unwrap() > 1.0);
        assert!(matches!(multires_stft_loss_value(&sine[..100], &sine, &res), Err(Error::Contract(_))));

        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(&[n], noise.clone()));
        let l = multires_stft_loss(&mut g, p, &sine, &res).unwrap();
        let want = multires_stft_loss_value(&noise, &sine, &res).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-9);
    }

    #[test]
    fn conditioning_layout() {
        let feat = AcousticFeatures {
            mel: Tensor::from_fn(&[3, 4], |i| i as f64),
            f0: vec![220.0, 0.0, 440.0],
            vuv: vec![1.0, 0.0, 1.0],
            hop_s: 0.005,
            window_s: 0.02,
        };
        let stats = NormStats::compute([&feat]).unwrap();
        let c = ConditioningFeatures::from_features(&feat, &stats).unwrap();
        assert_eq!(c.frames.shape(), &[3, 6]);
        assert_eq!(c.frames.at2(1, 4), 0.0);
        assert_eq!(c.frames.at2(2, 5), 1.0);
        assert!(c.frames.at2(2, 4) > 0.0);
        assert_eq!(c.f0_hz, vec![220.0, 0.0, 440.0]);
        c.validate(6).unwrap();
    }
}
