//! Sub-band mel discriminators: overlapping mel-bin bands, one 2D-conv
//! LS-GAN discriminator per band, each judging random time windows.

use cantus_nn::layers::Conv2d;
use cantus_nn::{Bound, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan;

/// Half-open mel-bin intervals `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubBandSpec {
    pub bands: Vec<(usize, usize)>,
}

impl SubBandSpec {
    /// Low / mid / high halves of an 80-bin mel: (0,40), (20,60), (40,80).
    pub fn three_band() -> Self {
        Self { bands: vec![(0, 40), (20, 60), (40, 80)] }
    }

    /// Five overlapping bands over 80 bins.
    pub fn five_band() -> Self {
        Self { bands: vec![(0, 26), (13, 39), (26, 52), (39, 65), (52, 80)] }
    }

    pub fn single(n_mels: usize) -> Self {
        Self { bands: vec![(0, n_mels)] }
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.bands.iter().map(|(lo, hi)| hi - lo).collect()
    }

    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Spec("no bands".into()));
        }
        for &(lo, hi) in &self.bands {
            if !(lo < hi && hi <= n_mels) {
                return Err(Error::Spec(format!("band [{lo}, {hi}) invalid for {n_mels} bins")));
            }
        }
        for w in self.bands.windows(2) {
            let ((lo0, hi0), (lo1, _)) = (w[0], w[1]);
            if !(lo0 < lo1 && lo1 < hi0) {
                return Err(Error::Spec(format!("bands [{lo0}, {hi0}) and [{lo1}, ..) must be ordered and overlap")));
            }
        }
        if self.bands[0].0 != 0 || self.bands.last().map(|b| b.1) != Some(n_mels) {
            return Err(Error::Spec(format!("bands must cover [0, {n_mels})")));
        }
        Ok(())
    }

    /// Number of bands covering every bin.
    pub fn coverage(&self, n_mels: usize) -> Vec<usize> {
        let mut c = vec![0; n_mels];
        for &(lo, hi) in &self.bands {
            for x in &mut c[lo..hi.min(n_mels)] {
                *x += 1;
            }
        }
        c
    }
}

/// Column slices of `mel: [T, n_mels]`, one per band.
pub fn split_subbands(mel: &Tensor, spec: &SubBandSpec) -> Result<Vec<Tensor>> {
    spec.validate(mel.cols())?;
    Ok(spec.bands.iter().map(|&(lo, hi)| mel.slice_cols(lo, hi)).collect())
}

/// Random contiguous window `(start, len)` with `len` uniform in
/// `[min_frames, min(max_frames, t)]` and `start` uniform over valid
/// positions; the whole sequence when `t < min_frames`.
pub fn sample_window<R: Rng + ?Sized>(t: usize, min_frames: usize, max_frames: usize, rng: &mut R) -> (usize, usize) {
    if t <= min_frames {
        return (0, t);
    }
    let hi = max_frames.min(t).max(min_frames);
    let len = rng.random_range(min_frames..=hi);
    let start = rng.random_range(0..=t - len);
    (start, len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfDiscriminatorConfig {
    pub n_conv_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
}

impl Default for SfDiscriminatorConfig {
    fn default() -> Self {
        Self { n_conv_layers: 3, channels: 32, kernel: 3, stride: 2, leaky_slope: 0.2 }
    }
}

/// 2D-conv discriminator over a `[frames, bins]` window; emits a score map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandDiscriminator {
    convs: Vec<Conv2d>,
    proj: Conv2d,
    slope: f64,
}

impl BandDiscriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &SfDiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if cfg.n_conv_layers == 0 || cfg.channels == 0 || cfg.kernel.is_multiple_of(2) || cfg.stride == 0 {
            return Err(Error::Config(format!("bad sub-band discriminator config {cfg:?}")));
        }
        let pad = cfg.kernel / 2;
        let convs = (0..cfg.n_conv_layers)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { cfg.channels };
                Conv2d::new(
                    store,
                    &format!("conv{i}"),
                    c_in,
                    cfg.channels,
                    (cfg.kernel, cfg.kernel),
                    (cfg.stride, cfg.stride),
                    (pad, pad),
                    rng,
                )
            })
            .collect();
        let proj = Conv2d::new(store, "proj", cfg.channels, 1, (1, 1), (1, 1), (0, 0), rng);
        Ok(Self { convs, proj, slope: cfg.leaky_slope })
    }

    /// `window: [frames, bins]` -> flattened score map.
    pub fn forward(&self, g: &mut Graph, p: &Bound, window: Var) -> Var {
        let s = g.shape(window).to_vec();
        let mut x = g.reshape(window, &[1, s[0], s[1]]);
        for c in &self.convs {
            x = c.forward(g, p, x);
            x = g.leaky_relu(x, self.slope);
        }
        let y = self.proj.forward(g, p, x);
        let n = g.value(y).len();
        g.reshape(y, &[n])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfGanConfig {
    pub bands: SubBandSpec,
    pub discriminator: SfDiscriminatorConfig,
    pub min_window: usize,
    pub max_window: usize,
}

impl Default for SfGanConfig {
    fn default() -> Self {
        Self { bands: SubBandSpec::three_band(), discriminator: SfDiscriminatorConfig::default(), min_window: 32, max_window: 96 }
    }
}

/// One discriminator per band, each with its own parameter store.
pub struct SfGan {
    pub cfg: SfGanConfig,
    pub stores: Vec<ParamStore>,
    nets: Vec<BandDiscriminator>,
}

impl SfGan {
    pub fn new(cfg: SfGanConfig, n_mels: usize, seed: u64) -> Result<Self> {
        cfg.bands.validate(n_mels)?;
        if cfg.min_window == 0 || cfg.min_window > cfg.max_window {
            return Err(Error::Config(format!("window range [{}, {}] invalid", cfg.min_window, cfg.max_window)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stores = Vec::new();
        let mut nets = Vec::new();
        for _ in &cfg.bands.bands {
            let mut s = ParamStore::new();
            nets.push(BandDiscriminator::new(&mut s, &cfg.discriminator, &mut rng)?);
            stores.push(s);
        }
        Ok(Self { cfg, stores, nets })
    }

    pub fn n_bands(&self) -> usize {
        self.nets.len()
    }

    /// Score map of band `b` for a random window of `mel: [T, n_mels]`.
    pub fn score_window<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, band: usize, mel: Var, rng: &mut R) -> Var {
        let t = g.shape(mel)[0];
        let (start, len) = sample_window(t, self.cfg.min_window, self.cfg.max_window, rng);
        let (lo, hi) = self.cfg.bands.bands[band];
        let rows = g.slice_rows(mel, start, start + len);
        let win = g.slice_cols(rows, lo, hi);
        self.nets[band].forward(g, p, win)
    }

    /// Adversarial generator term for predicted `mel`; discriminators are frozen.
    pub fn generator_loss<R: Rng + ?Sized>(&self, g: &mut Graph, mel: Var, rng: &mut R) -> Result<Var> {
        let fakes: Vec<Var> = (0..self.n_bands())
            .map(|b| {
                let p = self.stores[b].bind_frozen(g);
                self.score_window(g, &p, b, mel, rng)
            })
            .collect();
        sf_generator_loss(g, &fakes, self.n_bands())
    }
}

/// Sum over bands of `mean((1 - D_f(fake))^2)`.
pub fn sf_generator_loss(g: &mut Graph, fake_scores: &[Var], n_bands: usize) -> Result<Var> {
    gan::generator_loss(g, fake_scores, n_bands)
}

/// Per-band `mean((1 - D_f(real))^2) + mean(D_f(fake)^2)`.
pub fn sf_discriminator_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Vec<Var>> {
    gan::discriminator_losses(g, real, fake)
}
