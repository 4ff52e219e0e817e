//! Multi-length waveform discriminators. Each one sees a random crop of a
//! fixed duration; real and generated crops share the start offset.

use cantus_nn::layers::Conv1d;
use cantus_nn::{Bound, Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan;

/// Crop lengths in samples, one discriminator per entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub lengths: Vec<usize>,
}

impl CropSpec {
    pub fn from_seconds(seconds: &[f64], sample_rate: u32) -> Result<Self> {
        let lengths = seconds
            .iter()
            .map(|&s| {
                let n = s * sample_rate as f64;
                if s.is_finite() && s > 0.0 && (n - n.round()).abs() < 1e-9 {
                    Ok(n.round() as usize)
                } else {
                    Err(Error::Config(format!("crop length {s} s must be a positive whole number of samples at {sample_rate} Hz")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self { lengths };
        spec.validate()?;
        Ok(spec)
    }

    /// 0.25 / 0.5 / 0.75 / 1.0 s.
    pub fn default_for(sample_rate: u32) -> Self {
        Self::from_seconds(&[0.25, 0.5, 0.75, 1.0], sample_rate).expect("static crop lengths")
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths[0] == 0 || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("crop lengths {:?} invalid", self.lengths)));
        }
        Ok(())
    }
}

/// Start offset of a `crop`-sample window in a `len`-sample signal, uniform
/// over `[0, len - crop]`. `None` means the signal is shorter than the crop:
/// the whole waveform is kept and that discriminator sits the step out.
pub fn crop_start<R: Rng + ?Sized>(len: usize, crop: usize, rng: &mut R) -> Option<usize> {
    (len >= crop).then(|| rng.random_range(0..=len - crop))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlDiscriminatorConfig {
    pub n_layers: usize,
    pub kernel: usize,
    pub channels: usize,
    pub leaky_slope: f64,
}

impl Default for MlDiscriminatorConfig {
    fn default() -> Self {
        Self { n_layers: 10, kernel: 9, channels: 64, leaky_slope: 0.2 }
    }
}

/// Dilated 1D-conv stack (dilation `i + 1` at layer `i`) ending in a 1x1
/// projection to one score per sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveDiscriminator {
    convs: Vec<Conv1d>,
    out: Conv1d,
    slope: f64,
}

impl WaveDiscriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &MlDiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if cfg.n_layers == 0 || cfg.channels == 0 || cfg.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("bad waveform discriminator config {cfg:?}")));
        }
        let convs = (0..cfg.n_layers)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { cfg.channels };
                Conv1d::new(store, &format!("conv{i}"), c_in, cfg.channels, cfg.kernel, i + 1, true, rng)
            })
            .collect();
        let out = Conv1d::new(store, "out", cfg.channels, 1, 1, 1, true, rng);
        Ok(Self { convs, out, slope: cfg.leaky_slope })
    }

    /// `wave: [L]` -> per-sample scores `[L]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, wave: Var) -> Var {
        let n = g.shape(wave)[0];
        let mut x = g.reshape(wave, &[1, n]);
        for c in &self.convs {
            x = c.forward(g, p, x);
            x = g.leaky_relu(x, self.slope);
        }
        let y = self.out.forward(g, p, x);
        g.reshape(y, &[n])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlGanConfig {
    pub crops: CropSpec,
    pub discriminator: MlDiscriminatorConfig,
}

impl MlGanConfig {
    pub fn full(sample_rate: u32) -> Self {
        Self { crops: CropSpec::default_for(sample_rate), discriminator: MlDiscriminatorConfig::default() }
    }
}

/// Crop placement shared by the real and generated sides for one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPlan {
    /// Per discriminator: `Some(start)` or `None` when skipped.
    pub starts: Vec<Option<usize>>,
}

impl CropPlan {
    pub fn active(&self) -> usize {
        self.starts.iter().filter(|s| s.is_some()).count()
    }
}

/// One discriminator per crop length, each with its own parameter store.
pub struct MlGan {
    pub cfg: MlGanConfig,
    pub stores: Vec<ParamStore>,
    nets: Vec<WaveDiscriminator>,
}

impl MlGan {
    pub fn new(cfg: MlGanConfig, seed: u64) -> Result<Self> {
        cfg.crops.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stores = Vec::new();
        let mut nets = Vec::new();
        for _ in &cfg.crops.lengths {
            let mut s = ParamStore::new();
            nets.push(WaveDiscriminator::new(&mut s, &cfg.discriminator, &mut rng)?);
            stores.push(s);
        }
        Ok(Self { cfg, stores, nets })
    }

    pub fn n_discriminators(&self) -> usize {
        self.nets.len()
    }

    pub fn plan<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> CropPlan {
        CropPlan { starts: self.cfg.crops.lengths.iter().map(|&c| crop_start(len, c, rng)).collect() }
    }

    /// Scores of discriminator `d` on its crop of `wave: [L]`.
    pub fn score(&self, g: &mut Graph, p: &Bound, d: usize, wave: Var, start: usize) -> Var {
        let len = self.cfg.crops.lengths[d];
        let n = g.shape(wave)[0];
        let w = g.reshape(wave, &[1, n]);
        let c = g.slice_cols(w, start, start + len);
        let c = g.reshape(c, &[len]);
        self.nets[d].forward(g, p, c)
    }

    /// Generator term over the active discriminators (frozen); `None` when all are skipped.
    pub fn generator_loss(&self, g: &mut Graph, wave: Var, plan: &CropPlan) -> Result<Option<Var>> {
        let mut fakes = Vec::new();
        for (d, s) in plan.starts.iter().enumerate() {
            if let Some(start) = *s {
                let p = self.stores[d].bind_frozen(g);
                fakes.push(self.score(g, &p, d, wave, start));
            }
        }
        if fakes.is_empty() {
            return Ok(None);
        }
        let n = fakes.len();
        ml_generator_loss(g, &fakes, n).map(Some)
    }
}

/// Sum over discriminators of `mean((1 - D_k(fake))^2)`.
pub fn ml_generator_loss(g: &mut Graph, fake_scores: &[Var], n: usize) -> Result<Var> {
    gan::generator_loss(g, fake_scores, n)
}

/// Per-discriminator `mean((1 - D_k(real))^2) + mean(D_k(fake)^2)`.
pub fn ml_discriminator_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Vec<Var>> {
    gan::discriminator_losses(g, real, fake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cantus_nn::Tensor;

    #[test]
    fn default_crops_at_48k() {
        assert_eq!(CropSpec::default_for(48000).lengths, vec![12000, 24000, 36000, 48000]);
        assert!(CropSpec::from_seconds(&[0.0], 48000).is_err());
        assert!(CropSpec::from_seconds(&[0.00001], 48000).is_err());
        assert!(CropSpec { lengths: vec![] }.validate().is_err());
        assert!(CropSpec { lengths: vec![200, 100] }.validate().is_err());
        CropSpec::from_seconds(&[0.25], 48000).unwrap();
    }

    #[test]
    fn short_signal_skips() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(crop_start(100, 200, &mut rng), None);
        assert_eq!(crop_start(200, 200, &mut rng), Some(0));
        for _ in 0..50 {
            let s = crop_start(300, 200, &mut rng).unwrap();
            assert!(s <= 100);
        }
    }

    #[test]
    fn crop_starts_are_uniform() {
        // 10k draws of a 0.25 s crop from 1 s; 10 bins over [0, 36000].
        // p > 0.01 at 9 dof means chi-square below 21.666.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (bins, n) = (10usize, 10_000usize);
        let mut counts = vec![0f64; bins];
        for _ in 0..n {
            let s = crop_start(48_000, 12_000, &mut rng).unwrap();
            counts[(s * bins / 36_001).min(bins - 1)] += 1.0;
        }
        let e = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        assert!(chi2 < 21.666, "chi2 {chi2}");
    }

    #[test]
    fn loss_oracles() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: f64| -> Vec<Var> { (0..4).map(|_| g.constant(Tensor::full(&[16], v))).collect() };
        let (ones, zeros, halves) = (mk(&mut g, 1.0), mk(&mut g, 0.0), mk(&mut g, 0.5));
        for (v, want) in [(&ones, 0.0), (&zeros, 4.0), (&halves, 1.0)] {
            let l = ml_generator_loss(&mut g, v, 4).unwrap();
            assert_eq!(g.value(l).item(), want);
        }
        for (r, f, want) in [(&ones, &zeros, 0.0), (&zeros, &ones, 2.0), (&halves, &halves, 0.5)] {
            let l = ml_discriminator_loss(&mut g, r, f).unwrap();
            assert_eq!(g.value(l[3]).item(), want);
        }
    }

    #[test]
    fn shared_offsets_and_skips() {
        let cfg = MlGanConfig {
            crops: CropSpec { lengths: vec![16, 32, 64] },
            discriminator: MlDiscriminatorConfig { n_layers: 3, kernel: 3, channels: 4, leaky_slope: 0.2 },
        };
        let gan = MlGan::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = gan.plan(40, &mut rng);
        assert_eq!(plan.active(), 2);
        assert!(plan.starts[2].is_none());
        let mut g = Graph::new();
        let wave = g.constant(Tensor::from_fn(&[40], |i| (i as f64 * 0.2).sin()));
        let p = gan.stores[1].bind_frozen(&mut g);
        let start = plan.starts[1].unwrap();
        let s = gan.score(&mut g, &p, 1, wave, start);
        assert_eq!(g.shape(s), &[32]);
        assert!(gan.generator_loss(&mut g, wave, &plan).unwrap().is_some());
        let none = CropPlan { starts: vec![None; 3] };
        assert!(gan.generator_loss(&mut g, wave, &none).unwrap().is_none());
    }
}
